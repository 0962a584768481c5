from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vortexsim.biot_savart import (
    build_tree,
    kernel_blob,
    kernel_exact,
    velocity,
    velocity_direct,
    velocity_tree,
)
from vortexsim.core import ParticleEnsemble, total_circulation
from vortexsim.verification import rankine_oracle

coords = st.floats(-1e3, 1e3, allow_nan=False).filter(lambda v: abs(v) > 1e-6)
points = st.tuples(coords, coords)


def rel_l2(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


def test_kernel_exact_values():
    assert np.array_equal(kernel_exact((1.0, 0.0)), [0.0, 1 / (2 * math.pi)])
    assert np.allclose(kernel_exact((0.0, 2.0)), [-1 / (4 * math.pi), 0.0], rtol=0, atol=1e-17)
    with pytest.raises(ZeroDivisionError):
        kernel_exact((0.0, 0.0))


def test_kernel_blob_values():
    assert np.array_equal(kernel_blob((0.0, 0.0), 0.3), [0.0, 0.0])
    assert np.allclose(kernel_blob((1.0, 0.0), 1.0), [0.0, 1 / (4 * math.pi)], rtol=1e-15)


@settings(max_examples=200, deadline=None)
@given(points, st.floats(1e-4, 10))
def test_kernel_symmetries(x, delta):
    x = np.array(x)
    for kernel in (kernel_exact, lambda z: kernel_blob(z, delta)):
        k = kernel(x)
        assert np.array_equal(kernel(-x), -k)
        # orthogonal to x up to rounding of the two products
        assert abs(x @ k) <= 1e-15 * max(1.0, float(np.abs(x).max() * np.abs(k).max()))

def test_blob_converges_with_explicit_bound():
    # dense sampling oracle of |K_delta - K| <= delta^2 / (2 pi |x|^3) for |x| >= delta
    rng = np.random.default_rng(1)
    for delta in (1e-3, 1e-2, 0.1, 1.0):
        r = delta * np.exp(rng.uniform(0, 8, 20000))
        th = rng.uniform(0, 2 * np.pi, r.size)
        x = np.column_stack([r * np.cos(th), r * np.sin(th)])
        diff = np.linalg.norm(kernel_blob(x, delta) - kernel_exact(x), axis=1)
        assert np.all(diff <= delta**2 / (2 * np.pi * r**3) * (1 + 1e-12))
    x = np.array([0.3, -0.4])
    assert np.allclose(kernel_blob(x, 1e-9), kernel_exact(x), rtol=1e-15)


def test_direct_single_particle_limit():
    e = ParticleEnsemble([[0.0, 0.0]], [2 * math.pi], 1e-8)
    v = velocity_direct([[1.0, 0.0]], e)
    assert np.allclose(v, [[0.0, 1.0]], atol=1e-6)


def test_direct_symmetric_pair_cancels_at_origin():
    e = ParticleEnsemble([[0.7, -0.2], [-0.7, 0.2]], [1.3, 1.3], 0.05)
    assert np.array_equal(velocity_direct([[0.0, 0.0]], e), [[0.0, 0.0]])


def test_direct_self_term_is_zero():
    e = ParticleEnsemble([[0.25, 0.5]], [3.0], 0.1)
    assert np.array_equal(velocity_direct(e.positions, e), [[0.0, 0.0]])


def test_direct_rankine_far_field(rankine_10k):
    # radial quadrature oracle: v_theta(2) = (1/2) int_0^2 s w(s) ds = 1/4 for the unit patch
    assert rankine_oracle(2.0) == pytest.approx(0.25)
    point_limit = total_circulation(rankine_10k) / (4 * math.pi)
    # point kernel: only the lattice's fourfold multipole, O((R/r)^4 h^2), survives
    pts = dataclasses.replace(rankine_10k, blob_radius=1e-12)
    v = velocity_direct([[2.0, 0.0]], pts)[0]
    assert abs(v[0]) < 1e-12
    assert v[1] == pytest.approx(point_limit, rel=1e-4)
    # blob kernel: leading regularisation factor r^2 / (r^2 + delta^2)
    d2 = rankine_10k.blob_radius**2
    vb = velocity_direct([[2.0, 0.0]], rankine_10k)[0]
    assert vb[1] == pytest.approx(point_limit * 4.0 / (4.0 + d2), rel=2e-4)
    assert vb[1] == pytest.approx(0.25, rel=1e-2)


def test_momentum_identity(rankine_small):
    rng = np.random.default_rng(3)
    e = ParticleEnsemble(rng.normal(size=(500, 2)), rng.uniform(-1, 2, 500), 0.05)
    for ens in (e, rankine_small):
        v = velocity_direct(ens.positions, ens)
        imp = (ens.circulations[:, None] * v).sum(axis=0)
        scale = float((np.abs(ens.circulations)[:, None] * np.abs(v)).sum())
        assert np.all(np.abs(imp) <= 1e-14 * scale)


def test_discrete_divergence_is_second_order(rankine_small):
    probes = np.array([[0.3, 0.2], [0.9, -0.1], [1.4, 0.6], [-0.5, -1.2]])
    divs = []
    for h in (0.02, 0.01, 0.005):
        off = np.array([[h, 0], [-h, 0], [0, h], [0, -h]])
        pts = (probes[:, None, :] + off[None]).reshape(-1, 2)
        v = velocity_direct(pts, rankine_small).reshape(-1, 4, 2)
        d = (v[:, 0, 0] - v[:, 1, 0] + v[:, 2, 1] - v[:, 3, 1]) / (2 * h)
        divs.append(np.abs(d).max())
    assert divs[0] / divs[1] > 3.5 and divs[1] / divs[2] > 3.5
    assert divs[-1] <= 1e-3


def test_tree_single_particle():
    e = ParticleEnsemble([[0.3, -0.7]], [2.5], 0.01)
    t = build_tree(e, 16)
    assert t.node_count == 1
    assert t.root_monopole() == 2.5
    assert np.array_equal(t.centroid[0], [0.3, -0.7])
    targets = np.array([[0.0, 0.0], [0.3, -0.7], [5.0, 2.0]])
    assert np.array_equal(velocity_tree(targets, t, 0.5), velocity_direct(targets, e))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3000), st.integers(0, 2**31 - 1), st.integers(1, 40))
def test_tree_root_monopole_exact(n, seed, cap):
    rng = np.random.default_rng(seed)
    g = rng.normal(size=n) * 10.0 ** rng.integers(-8, 8, n)
    e = ParticleEnsemble(rng.uniform(-1, 1, (n, 2)), g, 0.01)
    t = build_tree(e, cap)
    assert t.root_monopole() == total_circulation(e)


def test_tree_index_coverage_and_moments():
    rng = np.random.default_rng(0)
    e = ParticleEnsemble(rng.uniform(-1, 1, (10_000, 2)), rng.uniform(0.5, 1.5, 10_000), 0.01)
    t = build_tree(e, 16)
    covered = np.concatenate([t.perm[t.start[i]:t.end[i]] for i in t.leaves()])
    assert np.array_equal(np.sort(covered), np.arange(len(e)))
    assert all(t.end[i] - t.start[i] <= 16 for i in t.leaves())
    lo, hi = t.center[0] - t.half[0], t.center[0] + t.half[0]
    assert np.all(e.positions >= lo) and np.all(e.positions <= hi)
    for i in range(t.node_count):
        kids = [c for c in t.children[i] if c >= 0]
        if kids:
            assert t.monopole[i] + t.monopole_lo[i] == pytest.approx(sum(t.monopole[k] + t.monopole_lo[k] for k in kids), rel=1e-14)
            w = np.array([abs(t.monopole[k]) for k in kids])
            c = (w[:, None] * t.centroid[kids]).sum(axis=0) / w.sum()
            assert np.allclose(t.centroid[i], c, rtol=1e-12, atol=1e-13)
    assert build_tree(e, 16).perm.tolist() == t.perm.tolist()


def test_tree_tiny_theta_matches_direct(rankine_small):
    d = velocity_direct(rankine_small.positions, rankine_small)
    tr = velocity_tree(rankine_small.positions, build_tree(rankine_small, 16), 1e-6)
    assert rel_l2(tr, d) <= 1e-12


def test_tree_accuracy_budget(rankine_10k):
    d = velocity_direct(rankine_10k.positions, rankine_10k)
    tree = build_tree(rankine_10k, 16)
    errs = [rel_l2(velocity_tree(rankine_10k.positions, tree, th), d) for th in (0.9, 0.7, 0.5, 0.3)]
    assert errs[2] <= 1e-3
    assert all(b <= 1.1 * a for a, b in zip(errs, errs[1:]))


def test_tree_foreign_targets(rankine_small):
    rng = np.random.default_rng(5)
    tp = rng.uniform(-2, 2, (700, 2))
    d = velocity_direct(tp, rankine_small)
    assert rel_l2(velocity(tp, rankine_small, mode="tree", theta_mac=0.5), d) <= 1e-3


def test_tree_rejects_bad_input(rankine_small):
    t = build_tree(rankine_small, 16)
    for th in (0.0, -0.1, 1.5):
        with pytest.raises(ValueError):
            velocity_tree(rankine_small.positions, t, th)
    with pytest.raises(ValueError):
        velocity_tree(rankine_small.positions, t, 0.5, delta=rankine_small.blob_radius * 2)
    with pytest.raises(ValueError):
        velocity([[0, 0]], rankine_small, mode="fmm")


def test_results_independent_of_worker_count(rankine_small):
    tree = build_tree(rankine_small, 16)
    pts = rankine_small.positions
    ref_t = velocity_tree(pts, tree, 0.5, workers=1)
    ref_d = velocity_direct(pts, rankine_small, workers=1)
    for w in (2, 3, 8):
        assert np.array_equal(velocity_tree(pts, tree, 0.5, workers=w), ref_t)
        assert np.array_equal(velocity_direct(pts, rankine_small, workers=w), ref_d)


def test_worker_env(monkeypatch):
    from vortexsim.biot_savart import worker_count

    monkeypatch.setenv("VORTEXSIM_WORKERS", "3")
    assert worker_count() == 3
    assert worker_count(5) == 5
