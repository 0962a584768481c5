"""Velocity from vorticity: exact and blob kernels, direct summation, Barnes-Hut treecode.

Evaluation is parallel over targets only.  Each target's sum runs in a fixed
order inside one worker, so results are bit-identical for any worker count.
The worker count comes from the ``VORTEXSIM_WORKERS`` environment variable
unless passed explicitly.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba as nb
import numpy as np

from .core import FloatArray, ParticleEnsemble

TWO_PI = 2.0 * math.pi
MAX_DEPTH = 48


def worker_count(workers: int | None = None) -> int:
    if workers is None:
        workers = int(os.environ.get("VORTEXSIM_WORKERS", "1"))
    if workers < 1:
        raise ValueError("worker count must be >= 1")
    return workers


def _as_points(x) -> FloatArray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.shape[-1] != 2:
        raise ValueError("points must have a trailing dimension of size 2")
    return arr


def kernel_exact(x):
    """Biot-Savart kernel ``x_perp / (2 pi |x|^2)``; singular at the origin."""
    x = _as_points(x)
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2
    if np.any(r2 == 0.0):
        raise ZeroDivisionError("Biot-Savart kernel is singular at x = 0")
    out = np.stack([-x[..., 1], x[..., 0]], axis=-1) / (TWO_PI * r2)[..., None]
    return out


def kernel_blob(x, delta: float):
    """Algebraic blob kernel ``x_perp / (2 pi (|x|^2 + delta^2))``."""
    if not delta > 0:
        raise ValueError("blob radius must be positive")
    x = _as_points(x)
    r2 = x[..., 0] ** 2 + x[..., 1] ** 2 + delta * delta
    return np.stack([-x[..., 1], x[..., 0]], axis=-1) / (TWO_PI * r2)[..., None]


def _run_chunks(fn, m: int, workers: int) -> None:
    if workers == 1 or m < 2 * workers:
        fn(0, m)
        return
    bounds = np.linspace(0, m, workers + 1).astype(np.int64)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        for f in futures:
            f.result()


@nb.njit(nogil=True, cache=True, error_model="numpy")
def _direct_range(tx, ty, sx, sy, g, d2, out, start, stop):
    n = sx.shape[0]
    for t in range(start, stop):
        x = tx[t]
        y = ty[t]
        su = 0.0
        cu = 0.0
        sv = 0.0
        cv = 0.0
        for j in range(n):
            rx = x - sx[j]
            ry = y - sy[j]
            w = g[j] / (rx * rx + ry * ry + d2)
            a = -ry * w
            s = su + a
            if abs(su) >= abs(a):
                cu += (su - s) + a
            else:
                cu += (a - s) + su
            su = s
            b = rx * w
            s = sv + b
            if abs(sv) >= abs(b):
                cv += (sv - s) + b
            else:
                cv += (b - s) + sv
            sv = s
        out[t, 0] = (su + cu) / TWO_PI
        out[t, 1] = (sv + cv) / TWO_PI


def velocity_direct(targets, ensemble: ParticleEnsemble, *, workers: int | None = None) -> FloatArray:
    """Blob-kernel velocity at ``targets`` by O(N M) compensated summation."""
    tp = np.ascontiguousarray(_as_points(targets).reshape(-1, 2))
    tx, ty = np.ascontiguousarray(tp[:, 0]), np.ascontiguousarray(tp[:, 1])
    pos = ensemble.positions
    sx, sy = np.ascontiguousarray(pos[:, 0]), np.ascontiguousarray(pos[:, 1])
    g = np.ascontiguousarray(ensemble.circulations)
    out = np.zeros((tp.shape[0], 2))
    d2 = ensemble.blob_radius**2
    _run_chunks(lambda a, b: _direct_range(tx, ty, sx, sy, g, d2, out, a, b), tp.shape[0], worker_count(workers))
    return out


# ---------------------------------------------------------------- treecode


@dataclass(frozen=True, eq=False)
class Quadtree:
    """Flattened quadtree over a particle ensemble.

    Nodes are stored breadth-first.  ``perm`` maps sorted slots to particle
    indices; leaf ``k`` owns sorted slots ``start[k]:end[k]``.  ``centroid``
    is the |Gamma|-weighted centre of each node (the Gamma-weighted centre for
    nonnegative data); ``dipole`` and ``quadrupole`` (xx, xy, yy) are the first
    and second moments of Gamma about it.
    """

    center: FloatArray
    half: FloatArray
    monopole: FloatArray
    monopole_lo: FloatArray
    centroid: FloatArray
    dipole: FloatArray
    quadrupole: FloatArray
    children: np.ndarray
    start: np.ndarray
    end: np.ndarray
    depth: np.ndarray
    is_leaf: np.ndarray
    perm: np.ndarray
    xs: FloatArray
    ys: FloatArray
    gs: FloatArray
    blob_radius: float
    leaf_capacity: int

    @property
    def node_count(self) -> int:
        return self.half.shape[0]

    @property
    def max_depth(self) -> int:
        return int(self.depth.max())

    def root_monopole(self) -> float:
        return float(self.monopole[0] + self.monopole_lo[0])

    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.is_leaf)


@nb.njit(cache=True)
def _two_sum(a, b):
    s = a + b
    bb = s - a
    err = (a - (s - bb)) + (b - bb)
    return s, err


@nb.njit(cache=True)
def _build(x, y, g, leaf_cap, max_depth, cap):
    n = x.shape[0]
    perm = np.arange(n)
    tmp = np.empty(n, np.int64)
    center = np.empty((cap, 2))
    half = np.empty(cap)
    start = np.empty(cap, np.int64)
    end = np.empty(cap, np.int64)
    depth = np.empty(cap, np.int64)
    children = -np.ones((cap, 4), np.int64)
    leaf = np.zeros(cap, np.bool_)

    xmin = x.min()
    xmax = x.max()
    ymin = y.min()
    ymax = y.max()
    cx = 0.5 * (xmin + xmax)
    cy = 0.5 * (ymin + ymax)
    h = 0.5 * max(xmax - xmin, ymax - ymin)
    h = h * (1.0 + 1e-12) + 1e-12 * (1.0 + abs(cx) + abs(cy))
    center[0, 0] = cx
    center[0, 1] = cy
    half[0] = h
    start[0] = 0
    end[0] = n
    depth[0] = 0
    count = 1
    k = 0
    quad = np.empty(n, np.int64)
    while k < count:
        s = start[k]
        e = end[k]
        if e - s <= leaf_cap or depth[k] >= max_depth:
            leaf[k] = True
            k += 1
            continue
        cx = center[k, 0]
        cy = center[k, 1]
        counts = np.zeros(4, np.int64)
        for i in range(s, e):
            p = perm[i]
            q = (1 if x[p] >= cx else 0) + (2 if y[p] >= cy else 0)
            quad[i] = q
            counts[q] += 1
        offs = np.zeros(4, np.int64)
        acc = s
        for q in range(4):
            offs[q] = acc
            acc += counts[q]
        pos = offs.copy()
        for i in range(s, e):
            q = quad[i]
            tmp[pos[q]] = perm[i]
            pos[q] += 1
        for i in range(s, e):
            perm[i] = tmp[i]
        hh = 0.5 * half[k]
        for q in range(4):
            if counts[q] == 0:
                continue
            if count >= cap:
                return -1, perm, center, half, start, end, depth, children, leaf
            c = count
            center[c, 0] = cx + (hh if (q & 1) else -hh)
            center[c, 1] = cy + (hh if (q & 2) else -hh)
            half[c] = hh
            start[c] = offs[q]
            end[c] = offs[q] + counts[q]
            depth[c] = depth[k] + 1
            children[k, q] = c
            count += 1
        k += 1
    return count, perm, center, half, start, end, depth, children, leaf


@nb.njit(cache=True)
def _moments(count, xs, ys, gs, center, start, end, children, leaf):
    mono = np.zeros(count)
    mono_lo = np.zeros(count)
    absw = np.zeros(count)
    cen = np.zeros((count, 2))
    dip = np.zeros((count, 2))
    quad = np.zeros((count, 3))
    for k in range(count - 1, -1, -1):
        if leaf[k]:
            hi = 0.0
            lo = 0.0
            a = 0.0
            mx = 0.0
            my = 0.0
            for i in range(start[k], end[k]):
                hi, err = _two_sum(hi, gs[i])
                lo += err
                w = abs(gs[i])
                a += w
                mx += w * xs[i]
                my += w * ys[i]
            if a > 0:
                ccx = mx / a
                ccy = my / a
            else:
                ccx = center[k, 0]
                ccy = center[k, 1]
            dx = 0.0
            dy = 0.0
            qxx = 0.0
            qxy = 0.0
            qyy = 0.0
            for i in range(start[k], end[k]):
                sx = xs[i] - ccx
                sy = ys[i] - ccy
                dx += gs[i] * sx
                dy += gs[i] * sy
                qxx += gs[i] * sx * sx
                qxy += gs[i] * sx * sy
                qyy += gs[i] * sy * sy
        else:
            hi = 0.0
            lo = 0.0
            a = 0.0
            mx = 0.0
            my = 0.0
            for q in range(4):
                c = children[k, q]
                if c < 0:
                    continue
                hi, err = _two_sum(hi, mono[c])
                lo += err + mono_lo[c]
                a += absw[c]
                mx += absw[c] * cen[c, 0]
                my += absw[c] * cen[c, 1]
            if a > 0:
                ccx = mx / a
                ccy = my / a
            else:
                ccx = center[k, 0]
                ccy = center[k, 1]
            dx = 0.0
            dy = 0.0
            qxx = 0.0
            qxy = 0.0
            qyy = 0.0
            for q in range(4):
                c = children[k, q]
                if c < 0:
                    continue
                mc = mono[c] + mono_lo[c]
                ox = cen[c, 0] - ccx
                oy = cen[c, 1] - ccy
                dx += dip[c, 0] + mc * ox
                dy += dip[c, 1] + mc * oy
                qxx += quad[c, 0] + 2.0 * dip[c, 0] * ox + mc * ox * ox
                qxy += quad[c, 1] + dip[c, 0] * oy + dip[c, 1] * ox + mc * ox * oy
                qyy += quad[c, 2] + 2.0 * dip[c, 1] * oy + mc * oy * oy
        s, err = _two_sum(hi, lo)
        mono[k] = s
        mono_lo[k] = err
        absw[k] = a
        cen[k, 0] = ccx
        cen[k, 1] = ccy
        dip[k, 0] = dx
        dip[k, 1] = dy
        quad[k, 0] = qxx
        quad[k, 1] = qxy
        quad[k, 2] = qyy
    return mono, mono_lo, cen, dip, quad


def build_tree(ensemble: ParticleEnsemble, leaf_capacity: int = 16) -> Quadtree:
    """Deterministic quadtree with monopole, dipole and quadrupole moments per node."""
    if len(ensemble) == 0:
        raise ValueError("cannot build a tree over an empty ensemble")
    if leaf_capacity < 1:
        raise ValueError("leaf capacity must be positive")
    x = np.ascontiguousarray(ensemble.positions[:, 0])
    y = np.ascontiguousarray(ensemble.positions[:, 1])
    g = np.ascontiguousarray(ensemble.circulations)
    n = len(ensemble)
    cap = 8 * (n // leaf_capacity + 1) + 64
    while True:
        count, perm, center, half, start, end, depth, children, leaf = _build(x, y, g, leaf_capacity, MAX_DEPTH, cap)
        if count > 0:
            break
        cap *= 2
    xs, ys, gs = x[perm], y[perm], g[perm]
    center, half, start, end = center[:count], half[:count], start[:count], end[:count]
    depth, children, leaf = depth[:count], children[:count], leaf[:count]
    mono, mono_lo, cen, dip, quad = _moments(count, xs, ys, gs, center, start, end, children, leaf)
    return Quadtree(
        center, half, mono, mono_lo, cen, dip, quad, children, start, end, depth, leaf, perm,
        xs, ys, gs, ensemble.blob_radius, leaf_capacity,
    )


# Far-field sums may be reassociated (they are approximations anyway); the
# near-field kernel above is compiled without fastmath so a lone particle
# reproduces the direct sum bit for bit.
@nb.njit(nogil=True, cache=True, fastmath={"reassoc", "nsz", "nnan", "ninf"}, error_model="numpy")
def _far_field(gx, gy, m_t, nf, fm, fcx, fcy, fdx, fdy, fqxx, fqxy, fqyy, d2, au, av):
    for ii in range(m_t):
        x = gx[ii]
        y = gy[ii]
        su = 0.0
        sv = 0.0
        for j in range(nf):
            rx = x - fcx[j]
            ry = y - fcy[j]
            inv = 1.0 / (rx * rx + ry * ry + d2)
            inv2 = inv * inv
            inv3 = inv2 * inv
            m = fm[j]
            px = fdx[j]
            py = fdy[j]
            qxx = fqxx[j]
            qxy = fqxy[j]
            qyy = fqyy[j]
            tr = qxx + qyy
            rqr = qxx * rx * rx + 2.0 * qxy * rx * ry + qyy * ry * ry
            # M K - (D . grad) K + Q : grad grad K / 2, with 1/(2 pi) applied by the caller
            su += (
                -m * ry * inv
                - (px * 2.0 * rx * ry * inv2 + py * (2.0 * ry * ry * inv2 - inv))
                + 2.0 * inv2 * (qxy * rx + qyy * ry) + ry * inv2 * tr - 4.0 * ry * inv3 * rqr
            )
            sv += (
                m * rx * inv
                - (px * (inv - 2.0 * rx * rx * inv2) - py * 2.0 * rx * ry * inv2)
                - 2.0 * inv2 * (qxx * rx + qxy * ry) - rx * inv2 * tr + 4.0 * rx * inv3 * rqr
            )
        au[ii] += su
        av[ii] += sv


@nb.njit(nogil=True, cache=True, error_model="numpy")
def _tree_groups(
    tx, ty, gperm, gstart, gend, xs, ys, gs, half, mono, cen, dip, quad,
    children, start, end, leaf, theta2, d2, out, a, b,
):
    nnodes = half.shape[0]
    npart = xs.shape[0]
    stack = np.empty(4 * 64 + 8, np.int64)
    fm = np.empty(nnodes)
    fcx = np.empty(nnodes)
    fcy = np.empty(nnodes)
    fdx = np.empty(nnodes)
    fdy = np.empty(nnodes)
    fqxx = np.empty(nnodes)
    fqxy = np.empty(nnodes)
    fqyy = np.empty(nnodes)
    nxs = np.empty(npart)
    nys = np.empty(npart)
    ngs = np.empty(npart)
    gmax = 1
    for grp in range(a, b):
        gmax = max(gmax, gend[grp] - gstart[grp])
    gx = np.empty(gmax)
    gy = np.empty(gmax)
    au = np.empty(gmax)
    av = np.empty(gmax)
    for grp in range(a, b):
        s0 = gstart[grp]
        e0 = gend[grp]
        bx0 = np.inf
        bx1 = -np.inf
        by0 = np.inf
        by1 = -np.inf
        for ii in range(s0, e0):
            t = gperm[ii]
            bx0 = min(bx0, tx[t])
            bx1 = max(bx1, tx[t])
            by0 = min(by0, ty[t])
            by1 = max(by1, ty[t])
        nf = 0
        nn = 0
        sp = 1
        stack[0] = 0
        while sp > 0:
            sp -= 1
            k = stack[sp]
            if leaf[k]:
                for i in range(start[k], end[k]):
                    nxs[nn] = xs[i]
                    nys[nn] = ys[i]
                    ngs[nn] = gs[i]
                    nn += 1
                continue
            cx = cen[k, 0]
            cy = cen[k, 1]
            ex = max(bx0 - cx, 0.0, cx - bx1)
            ey = max(by0 - cy, 0.0, cy - by1)
            size = 2.0 * half[k]
            if size * size < theta2 * (ex * ex + ey * ey):
                fm[nf] = mono[k]
                fcx[nf] = cx
                fcy[nf] = cy
                fdx[nf] = dip[k, 0]
                fdy[nf] = dip[k, 1]
                fqxx[nf] = quad[k, 0]
                fqxy[nf] = quad[k, 1]
                fqyy[nf] = quad[k, 2]
                nf += 1
            else:
                for q in range(3, -1, -1):
                    c = children[k, q]
                    if c >= 0:
                        stack[sp] = c
                        sp += 1
        # sources outer, targets inner: the inner loop vectorizes without
        # reassociation and every target is summed in the same fixed order
        m_t = e0 - s0
        for ii in range(m_t):
            t = gperm[s0 + ii]
            gx[ii] = tx[t]
            gy[ii] = ty[t]
            au[ii] = 0.0
            av[ii] = 0.0
        for j in range(nn):
            sx = nxs[j]
            sy = nys[j]
            gj = ngs[j]
            for ii in range(m_t):
                rx = gx[ii] - sx
                ry = gy[ii] - sy
                w = gj / (rx * rx + ry * ry + d2)
                au[ii] -= ry * w
                av[ii] += rx * w
        _far_field(gx, gy, m_t, nf, fm, fcx, fcy, fdx, fdy, fqxx, fqxy, fqyy, d2, au, av)
        for ii in range(m_t):
            t = gperm[s0 + ii]
            out[t, 0] = au[ii] / TWO_PI
            out[t, 1] = av[ii] / TWO_PI


def _target_groups(tp: FloatArray, tree: Quadtree, same: bool):
    if same:
        leaves = tree.leaves()
        return tree.perm, tree.start[leaves], tree.end[leaves]
    x = np.ascontiguousarray(tp[:, 0])
    y = np.ascontiguousarray(tp[:, 1])
    cap = 8 * (tp.shape[0] // tree.leaf_capacity + 1) + 64
    while True:
        count, perm, _, _, start, end, _, _, leaf = _build(x, y, x, tree.leaf_capacity, MAX_DEPTH, cap)
        if count > 0:
            break
        cap *= 2
    lv = np.flatnonzero(leaf[:count])
    return perm, start[lv], end[lv]


def velocity_tree(targets, tree: Quadtree, theta_mac: float, delta: float | None = None, *, workers: int | None = None) -> FloatArray:
    """Barnes-Hut velocity with a monopole + dipole + quadrupole far field.

    Targets are processed in spatial groups (the tree's own leaves when the
    targets are the tree's particles).  A node is accepted for a group when
    ``size / distance(centroid, group bounding box) < theta_mac``, which for a
    single target is the usual size-over-distance criterion; leaves are always
    summed directly.
    """
    if not (0.0 < theta_mac <= 1.0):
        raise ValueError(f"theta_mac must lie in (0, 1], got {theta_mac}")
    if delta is None:
        delta = tree.blob_radius
    elif delta != tree.blob_radius:
        raise ValueError("blob radius does not match the tree's ensemble")
    tp = np.ascontiguousarray(_as_points(targets).reshape(-1, 2))
    if tp.shape[0] == 0:
        return np.zeros((0, 2))
    tx, ty = np.ascontiguousarray(tp[:, 0]), np.ascontiguousarray(tp[:, 1])
    same = tp.shape[0] == tree.perm.shape[0] and np.array_equal(tx[tree.perm], tree.xs) and np.array_equal(ty[tree.perm], tree.ys)
    gperm, gstart, gend = _target_groups(tp, tree, same)
    out = np.zeros((tp.shape[0], 2))
    args = (
        tree.xs, tree.ys, tree.gs, tree.half, tree.monopole, tree.centroid, tree.dipole, tree.quadrupole,
        tree.children, tree.start, tree.end, tree.is_leaf, theta_mac * theta_mac, delta * delta, out,
    )
    _run_chunks(
        lambda a, b: _tree_groups(tx, ty, gperm, gstart, gend, *args, a, b), gstart.shape[0], worker_count(workers)
    )
    return out


def velocity(
    targets,
    ensemble: ParticleEnsemble,
    *,
    mode: str = "direct",
    theta_mac: float = 0.5,
    leaf_capacity: int = 16,
    workers: int | None = None,
) -> FloatArray:
    """Dispatch to direct or tree summation."""
    if mode == "direct":
        return velocity_direct(targets, ensemble, workers=workers)
    if mode == "tree":
        tree = build_tree(ensemble, leaf_capacity)
        return velocity_tree(targets, tree, theta_mac, workers=workers)
    raise ValueError(f"unknown summation mode {mode!r}")
