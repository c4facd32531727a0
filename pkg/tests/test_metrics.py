import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from palmdiff.denoiser import Denoiser, DenoiserConfig
from palmdiff.diffusion import TransitionKernel, cosine_schedule
from palmdiff.graph import enumerate_paths, example_graph
from palmdiff.guidance import RewardSpec
from palmdiff.metrics import (
    EmpiricalPathDistribution,
    EmptyConditional,
    EmptySamples,
    InsufficientSamples,
    UndefinedMetric,
    compare,
    condition_on_max,
    divergence,
    exact_path_distribution,
    features,
    features_batch,
    flgd,
    footrule,
    half_l1,
    isl,
    kl,
    layer_marginals,
    sfd,
    smoothing_eps,
    target_distribution,
    valid_rate,
)
from palmdiff.palm import InvalidPath, PalmShape, encode, to_onehot


def ids(g, word):
    return tuple(g.vertex(c) for c in word)


def dist(mapping):
    return EmpiricalPathDistribution.from_mass(mapping)


# -- valid rate ----------------------------------------------------------------

def test_valid_rate():
    g = example_graph()
    good = [ids(g, "ACGH"), ids(g, "ABEI"), ids(g, "ADGJ")]
    bad = ids(g, "ABGH")
    assert valid_rate(g, good + [bad]) == 75.0
    assert valid_rate(g, [bad, bad]) == 0.0
    assert valid_rate(g, good) == 100.0
    with pytest.raises(EmptySamples):
        valid_rate(g, [])


# -- path-level divergences ----------------------------------------------------

def test_divergences_disjoint_point_masses():
    p, q = dist({(0,): 1.0}), dist({(1,): 1.0})
    assert divergence(p, q, "L1") == 2.0
    assert divergence(p, q, "TV") == 1.0
    assert half_l1(p, q) == 1.0


def test_kl_closed_form():
    p = dist({(0,): 0.75, (1,): 0.25})
    q = dist({(0,): 0.5, (1,): 0.5})
    expected = 0.75 * math.log(1.5) + 0.25 * math.log(0.5)
    # no samples behind these masses: the smoothing is negligible
    assert divergence(p, q, "KL") == pytest.approx(expected, abs=1e-10)
    assert kl(np.array([0.75, 0.25]), np.array([0.5, 0.5]), 0.0) == pytest.approx(expected, abs=1e-15)


def test_kl_finite_on_support_mismatch():
    p = EmpiricalPathDistribution.from_samples([(0,)] * 10)
    q = EmpiricalPathDistribution.from_samples([(1,)] * 10)
    val = divergence(p, q, "KL")
    assert np.isfinite(val) and val > 0
    assert smoothing_eps(10, 4) == 1 / 100


@pytest.mark.parametrize("kind", ["KL", "L1", "TV"])
def test_divergence_zero_on_identical(kind):
    samples = [(0, 1), (0, 2), (0, 2), (0, 3)]
    p = EmpiricalPathDistribution.from_samples(samples)
    assert divergence(p, EmpiricalPathDistribution.from_samples(samples[::-1]), kind) == 0.0


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=40), st.lists(st.integers(0, 6), min_size=1, max_size=40))
def test_divergence_bounds(a, b):
    p = EmpiricalPathDistribution.from_samples([(x,) for x in a])
    q = EmpiricalPathDistribution.from_samples([(x,) for x in b])
    assert abs(p.mass.sum() - 1) < 1e-9
    assert divergence(p, q, "KL") >= -1e-12
    assert 0 <= divergence(p, q, "L1") <= 2 + 1e-12
    assert 0 <= divergence(p, q, "TV") <= 1 + 1e-12
    union = len(set(a) | set(b))
    if union >= 2:
        assert 0 <= sfd(p, q) <= 1


# -- SFD -----------------------------------------------------------------------

@pytest.mark.parametrize("n", [3, 4])
def test_sfd_reversed_rankings(n):
    p = np.arange(n, 0, -1, dtype=float)
    assert footrule(p / p.sum(), p[::-1] / p.sum()) == 1.0


def test_sfd_hand_values():
    # n = 4 reversed: displacements 3+1+1+3 = 8 = M(4)
    p = dist({(i,): m for i, m in enumerate([0.4, 0.3, 0.2, 0.1])})
    q = dist({(i,): m for i, m in enumerate([0.1, 0.2, 0.3, 0.4])})
    assert sfd(p, q) == 1.0
    assert sfd(p, p) == 0.0


def test_sfd_tie_break_by_index():
    # all tied in p: ranks follow index; q swaps the first two
    assert footrule(np.array([0.25] * 4), np.array([0.25, 0.35, 0.2, 0.2])) == pytest.approx(2 / 8)


def test_sfd_needs_two_elements():
    with pytest.raises(UndefinedMetric):
        sfd(dist({(0,): 1.0}), dist({(0,): 1.0}))


def test_sfd_absent_paths_count_as_zero():
    p = dist({(0,): 0.6, (1,): 0.4})
    q = dist({(2,): 1.0})
    # union order (0),(1),(2): p ranks 0,1,2 ; q ranks 1,2,0
    assert sfd(p, q) == pytest.approx((1 + 1 + 2) / 4)


# -- IS-L ----------------------------------------------------------------------

def test_isl_example_values():
    g = example_graph()
    tgt = [ids(g, "ACGH")] * 2
    gen = [ids(g, "ADGJ")] * 2
    assert isl(g, tgt, gen, "L1") == 4.0
    assert isl(g, tgt, gen, "TV") == 2.0


@pytest.mark.parametrize("kind", ["L1", "KL", "TV", "SF"])
def test_isl_zero_on_identical(kind):
    g = example_graph()
    s = [ids(g, w) for w in ("ACGH", "ABEI", "ADGJ", "ACGH")]
    assert isl(g, s, list(reversed(s)), kind) == 0.0


def test_isl_first_layer_contributes_nothing():
    g = example_graph()
    rng = np.random.default_rng(0)
    paths = enumerate_paths(g)
    for _ in range(20):
        a = [paths[i] for i in rng.integers(10, size=30)]
        b = [paths[i] for i in rng.integers(10, size=7)]
        ma, mb = layer_marginals(g, a), layer_marginals(g, b)
        np.testing.assert_array_equal(ma[0], [1.0])
        np.testing.assert_array_equal(mb[0], [1.0])
        np.testing.assert_allclose([m.sum() for m in ma], 1.0)


def test_isl_empty_raises():
    g = example_graph()
    with pytest.raises(EmptySamples):
        isl(g, [], [ids(g, "ACGH")], "L1")


# -- features and FLGD ---------------------------------------------------------

def test_features_example_path():
    g = example_graph()
    f = features(g, ids(g, "ACGH")).reshape(10, 3)
    nz = {(int(v), int(j)) for v, j in zip(*np.nonzero(f))}
    A, C, G, H = ids(g, "ACGH")
    assert nz == {(A, g.edge_index(A, C)), (C, g.edge_index(C, G)), (G, g.edge_index(G, H))}
    with pytest.raises(InvalidPath):
        features(g, ids(g, "ABGH"))


def test_features_consistent_with_encoder():
    g = example_graph()
    shape = PalmShape.from_graph(g)
    paths = enumerate_paths(g)
    fb = features_batch(g, paths)
    for p, row in zip(paths, fb):
        x = to_onehot(shape, np.argmax(encode(g, p, np.random.default_rng(1)), -1)
                      * (shape.degrees > 0) - (shape.degrees == 0))
        off = np.setdiff1d(np.arange(g.n_vertices), p)
        x[off] = 0
        np.testing.assert_array_equal(row, x.reshape(-1))
        np.testing.assert_array_equal(row, features(g, p))
        assert row @ row == g.n_layers - 1
    assert len({r.tobytes() for r in fb}) == len(paths)


def test_flgd_identical_and_symmetric():
    g = example_graph()
    paths = enumerate_paths(g)
    rng = np.random.default_rng(0)
    a = features_batch(g, [paths[i] for i in rng.integers(10, size=200)])
    b = features_batch(g, [paths[i] for i in rng.integers(10, size=150)])
    assert flgd(a, a) == pytest.approx(0.0, abs=1e-6)
    assert flgd(a, b) == pytest.approx(flgd(b, a), abs=1e-9)
    assert flgd(a, b) > 0


def test_flgd_disjoint_paths_positive():
    g = example_graph()
    a = features_batch(g, [ids(g, "ACGH")] * 5)
    b = features_batch(g, [ids(g, "ADGJ")] * 5)
    assert flgd(a, b) > 0


def test_flgd_one_dimensional_gaussians():
    rng = np.random.default_rng(0)
    d = 1.5
    a = rng.normal(0, 1, size=200_000)
    b = rng.normal(d, 1, size=200_000)
    assert flgd(a, b) == pytest.approx(d * d, abs=0.02)


def test_flgd_closed_form_with_covariances():
    # Fréchet distance between N(0, diag(1,4)) and N(0, diag(4,1)): Tr term is 2*(1+4) - 2*(2+2) = 2
    rng = np.random.default_rng(1)
    a = rng.normal(size=(400_000, 2)) * [1, 2]
    b = rng.normal(size=(400_000, 2)) * [2, 1]
    assert flgd(a, b) == pytest.approx(2.0, abs=0.05)


def test_flgd_needs_two_samples():
    with pytest.raises(InsufficientSamples):
        flgd(np.zeros((1, 3)), np.zeros((5, 3)))


# -- target distribution --------------------------------------------------------

def uniform_model(g, T=32):
    shape = PalmShape.from_graph(g)
    return Denoiser(shape, DenoiserConfig(hidden=4, n_blocks=1)), TransitionKernel(shape, cosine_schedule(T))


def test_target_distribution_half_retention():
    g = example_graph()
    model, kernel = uniform_model(g)
    E, F, I = ids(g, "EFI")
    reward = RewardSpec.from_edges(g, [(E, I, 1.0), (F, I, 1.0)])
    target, kept, retention = target_distribution(g, model, kernel, reward, 65536, np.random.default_rng(0))
    assert retention == pytest.approx(0.5, abs=0.01)
    best = {p for p in enumerate_paths(g) if I in p}
    assert set(target.support) == best
    # conditioning the exact uniform-edge distribution gives the same answer
    exact = {p: m for p, m in exact_path_distribution(g).items() if p in best}
    assert half_l1(dist(exact), target) < 0.02
    assert divergence(dist(exact), target, "TV") < 0.02


def test_target_distribution_zero_reward_is_unconditional():
    g = example_graph()
    model, kernel = uniform_model(g, T=8)
    reward = RewardSpec.from_edges(g, [])
    target, kept, retention = target_distribution(g, model, kernel, reward, 2000, np.random.default_rng(0))
    assert retention == 1.0 and len(kept) == 2000


def test_condition_on_max_empty():
    with pytest.raises(EmptyConditional):
        condition_on_max(np.zeros((3, 2)), np.zeros(3), 1.0)


def test_compare_report():
    g = example_graph()
    paths = enumerate_paths(g)
    rep = compare(g, paths, paths)
    for key, val in rep.values.items():
        assert val == pytest.approx(0.0, abs=1e-6), key
    assert rep.counts == {"n_target": 10, "n_gen": 10}
