"""End-to-end acceptance checks, one test per numbered criterion.

Each test records a ``PASS``/``FAIL criterion N: ...`` line that conftest
prints in the terminal summary. Trained models are shared session fixtures;
the whole module takes about 20 minutes on one CPU core.
"""

import time

import numpy as np
import pytest
import torch

from palmdiff.cli import main as cli_main
from palmdiff.denoiser import Denoiser, DenoiserConfig
from palmdiff.diffusion import (
    TrainConfig,
    TransitionKernel,
    cosine_schedule,
    gradient_of_loss,
    loss_terms,
    on_path_mask,
    q_sample,
    sample_unguided,
    train,
)
from palmdiff.graph import build_dataset, count_paths, enumerate_paths, example_graph, load_graph, synth_pruned
from palmdiff.guidance import (
    GuidanceConfig,
    RewardSpec,
    expected_reward,
    guided_sample,
    reward_gradient,
    softmax_rows,
)
from palmdiff.metrics import (
    EmpiricalPathDistribution,
    compare,
    condition_on_max,
    divergence,
    flgd,
    half_l1,
    isl,
    sfd,
    valid_rate,
)
from palmdiff.palm import PalmShape, decode_indices, encode_indices

pytestmark = pytest.mark.acceptance

SCALES = (0, 1, 10, 100, 1000)
TOY_WIDTHS = [1] + [4] * 10
TOY_SEED = 6


def verdict(request, n, ok, detail):
    request.node.user_properties.append(("acceptance", f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"))
    assert ok, detail


def uniform_target(paths):
    return EmpiricalPathDistribution.from_mass({tuple(p): 1.0 for p in paths})


# -- shared trained models ---------------------------------------------------

@pytest.fixture(scope="session")
def fig1_model():
    g = example_graph()
    res = train(g, build_dataset(g), TrainConfig(epochs=10**6, max_steps=5000, seed=0))
    return g, res


@pytest.fixture(scope="session")
def toy_model():
    g = synth_pruned(TOY_WIDTHS, 0.5, seed=TOY_SEED)
    res = train(g, build_dataset(g), TrainConfig(epochs=10**6, max_steps=3000, batch_size=256, seed=0))
    return g, res


@pytest.fixture(scope="session")
def toy_pool(toy_model):
    """65536 unguided Toy samples; they double as the pool the sweep target is filtered from."""
    g, res = toy_model
    return sample_unguided(res.model, res.kernel, 65536, np.random.default_rng(100))


def preferred_edge(g, paths):
    """The middle-layer edge whose share of all paths is closest to a quarter (ties: lowest ids).

    A quarter keeps the filtered target well populated while leaving most of
    the unguided mass off target.
    """
    P = np.asarray(paths)
    lo, hi = 3, g.n_layers - 4
    best = None
    for v, w in g.edges():
        layer = g.layer_of[v]
        if not lo <= layer <= hi:
            continue
        frac = float(np.mean((P[:, layer] == v) & (P[:, layer + 1] == w)))
        key = (abs(frac - 0.25), v, w)
        if best is None or key < best:
            best = key
    return best[1], best[2]


@pytest.fixture(scope="session")
def toy_sweep(toy_model, toy_pool):
    g, res = toy_model
    v, w = preferred_edge(g, enumerate_paths(g))
    reward = RewardSpec.from_edges(g, [(v, w, 1.0)], label="preferred edge")
    target, _ = condition_on_max(toy_pool, reward.path_rewards(g, toy_pool), reward.r_max)
    n = 16384
    rows = {}
    for lam in SCALES:
        paths, rewards = guided_sample(g, res.model, res.kernel, reward, GuidanceConfig(float(lam)), n,
                                       np.random.default_rng(1000 + lam))
        rows[lam] = (rewards, compare(g, target, paths, with_flgd=False).values)
    return reward, rows


# -- 1: valid rate -------------------------------------------------------------

def test_criterion_1_valid_rate(request, fig1_model):
    g, trained = fig1_model
    shape = PalmShape.from_graph(g)
    kernel = TransitionKernel(shape, cosine_schedule(256))
    untrained = Denoiser(shape, DenoiserConfig())
    reward = RewardSpec.from_edges(g, [(g.vertex("G"), g.vertex("H"), 1.0)])
    t0 = time.perf_counter()
    rates = []
    for model, k in ((untrained, kernel), (trained.model, trained.kernel)):
        for lam in SCALES:
            paths, _ = guided_sample(g, model, k, reward, GuidanceConfig(float(lam)), 8192,
                                     np.random.default_rng(lam))
            rates.append(valid_rate(g, paths))
    elapsed = time.perf_counter() - t0
    ok = all(r == 100.0 for r in rates) and elapsed < 120
    verdict(request, 1, ok, f"VR={min(rates)} over {len(rates)} runs of 8192 samples, {elapsed:.0f}s")


# -- 2: DP against enumeration -------------------------------------------------

def enumeration_expected_reward(g, z, u):
    """Path-sum oracle, vectorised over a batch of (z, u) pairs."""
    shape = PalmShape.from_graph(g)
    P = softmax_rows(z, shape.mask)
    paths = np.array(enumerate_paths(g))
    src = paths[:, :-1]
    slot = np.vectorize(g.edge_index)(src, paths[:, 1:])
    prob = np.prod(P[:, src, slot], axis=-1)
    rew = np.sum(u[:, src, slot], axis=-1)
    return np.sum(prob * rew, axis=-1)


def random_graph(rng, seed):
    while True:
        widths = [1] + rng.integers(2, 7, size=rng.integers(2, 7)).tolist()
        try:
            g = synth_pruned(widths, float(rng.uniform(0.1, 0.6)), seed=seed)
        except Exception:
            continue
        if count_paths(g) <= 10**4:
            return g


def test_criterion_2_dp_matches_enumeration(request):
    rng = np.random.default_rng(2)
    worst = 0.0
    for seed in range(20):
        g = random_graph(rng, seed)
        mask = PalmShape.from_graph(g).mask
        z = rng.normal(size=(100, *mask.shape)) * 3
        u = np.where(mask, rng.normal(size=(100, *mask.shape)), 0.0)
        worst = max(worst, float(np.max(np.abs(expected_reward(g, z, u) - enumeration_expected_reward(g, z, u)))))
    verdict(request, 2, worst < 1e-9, f"max |DP - enumeration| = {worst:.2e} over 20 graphs x 100 pairs")


# -- 3: gradients -----------------------------------------------------------------

def test_criterion_3_gradients(request, fig1_model):
    rng = np.random.default_rng(3)
    h = 1e-5
    worst_r = 0.0
    for seed in range(100):
        g = random_graph(rng, 100 + seed)
        mask = PalmShape.from_graph(g).mask
        z = rng.normal(size=mask.shape) * 2
        u = np.where(mask, rng.normal(size=mask.shape), 0.0)
        grad = reward_gradient(g, z, u)
        for v, j in zip(*np.nonzero(mask)):
            zp, zm = z.copy(), z.copy()
            zp[v, j] += h
            zm[v, j] -= h
            fd = (expected_reward(g, zp, u) - expected_reward(g, zm, u)) / (2 * h)
            # floor: central differences carry ~1e-10 absolute error
            worst_r = max(worst_r, abs(grad[v, j] - fd) / max(abs(grad[v, j]), abs(fd), 1e-4))

    g, res = fig1_model
    model, kernel = res.model, res.kernel
    shape = kernel.shape
    paths = np.array(enumerate_paths(g))[rng.integers(10, size=16)]
    x0 = encode_indices(shape, paths, rng)
    t = rng.integers(1, kernel.T + 1, size=16)
    x_t = q_sample(kernel, x0, t, rng)
    on = on_path_mask(shape, paths)
    params = dict(model.named_parameters())
    grads = dict(zip(params, gradient_of_loss(model, kernel, (x_t, t, x0, on), 1.0)))

    def value():
        with torch.no_grad():
            return float(loss_terms(model, kernel, x0, x_t, t, on, 1.0)[0].mean())

    names = list(params)
    worst_d = 0.0
    for _ in range(32):
        name = names[rng.integers(len(names))]
        p = params[name]
        i = tuple(int(rng.integers(s)) for s in p.shape)
        old = p.data[i].item()
        vals = []
        for sign in (1, -1):
            p.data[i] = old + sign * 1e-5
            vals.append(value())
        p.data[i] = old
        fd = (vals[0] - vals[1]) / 2e-5
        gi = grads[name][i].item()
        worst_d = max(worst_d, abs(gi - fd) / max(abs(gi), abs(fd), 1e-6))
    ok = worst_r < 1e-6 and worst_d < 1e-4
    verdict(request, 3, ok, f"reward-gradient rel err {worst_r:.2e} (100 instances), "
                           f"denoiser loss rel err {worst_d:.2e} (32 parameters)")


# -- 4: kernel algebra --------------------------------------------------------------

def test_criterion_4_kernel_algebra(request, degree_ladder):
    shape = PalmShape.from_graph(degree_ladder)
    sched = cosine_schedule(256)
    kernel = TransitionKernel(shape, sched)
    stoch = prod_err = term = 0.0
    for v in range(1, 9):
        d = int(shape.degrees[v])
        running = np.eye(d)
        for t in range(1, 257):
            q = kernel.step_matrix(t, v)[:d, :d]
            stoch = max(stoch, np.abs(q.sum(0) - 1).max(), np.abs(q.sum(1) - 1).max())
            running = running @ q
            ab = sched.alpha_bar[t]
            closed = ab * np.eye(d) + (1 - ab) / d * np.ones((d, d))
            prod_err = max(prod_err, np.abs(running - closed).max(),
                           np.abs(kernel.cumulative_matrix(t, v)[:d, :d] - closed).max())
        p0 = torch.zeros(1, *shape.mask.shape, dtype=torch.float64)
        p0[0, v, 0] = 1.0
        marg = kernel.marginal(p0, torch.tensor([256]))[0, v, :d].numpy()
        term = max(term, float(np.abs(marg - 1 / d).max()), 0.5 * float(np.abs(marg - 1 / d).sum()))
    ok = stoch < 1e-12 and prod_err < 1e-10 and term < 1e-3
    verdict(request, 4, ok, f"stochasticity err {stoch:.1e}, product vs closed form {prod_err:.1e}, "
                           f"terminal TV {term:.1e} (D=1..8, T=256)")


# -- 5: learning sanity ---------------------------------------------------------------

def test_criterion_5_learning_sanity(request, fig1_model, toy_model, toy_pool):
    g1, res1 = fig1_model
    s1 = sample_unguided(res1.model, res1.kernel, 65536, np.random.default_rng(5))
    p1 = EmpiricalPathDistribution.from_samples(s1)
    tv1 = divergence(uniform_target(enumerate_paths(g1)), p1, "TV")
    h1 = half_l1(uniform_target(enumerate_paths(g1)), p1)
    g2, res2 = toy_model
    ref2 = uniform_target(enumerate_paths(g2))
    p2 = EmpiricalPathDistribution.from_samples(toy_pool)
    tv2 = divergence(ref2, p2, "TV")
    h2 = half_l1(ref2, p2)
    ok = tv1 < 0.05 and tv2 < 0.1 and res1.steps <= 5000 and res2.steps <= 5000
    verdict(request, 5, ok, f"Fig-1 TV {tv1:.4f} (half-L1 {h1:.3f}), Toy TV {tv2:.4f} (half-L1 {h2:.3f}; "
                           f"{g2.n_layers} layers, {g2.n_vertices} vertices), 65536 samples each")


def test_denoiser_ce_small_t(request, fig1_model):
    """Masked CE of the trained Fig-1 denoiser at t = 1 stays under 0.05 nats per on-path vertex."""
    g, res = fig1_model
    rng = np.random.default_rng(55)
    shape = res.kernel.shape
    paths = np.array(enumerate_paths(g)).repeat(400, axis=0)
    x0 = encode_indices(shape, paths, rng)
    t = np.ones(len(paths), dtype=np.int64)
    x_t = q_sample(res.kernel, x0, t, rng)
    on = on_path_mask(shape, paths)
    with torch.no_grad():
        ce = float(loss_terms(res.model, res.kernel, x0, x_t, t, on, 1.0)[2].sum()) / on.sum()
    assert ce < 0.05


# -- 6 and 7: reward sweep ---------------------------------------------------------------

def test_criterion_6_reward_rises_with_scale(request, toy_sweep):
    reward, rows = toy_sweep
    means = [rows[lam][0].mean() for lam in SCALES]
    ses = [rows[lam][0].std(ddof=1) / np.sqrt(len(rows[lam][0])) for lam in SCALES]
    monotone = all(means[i + 1] >= means[i] - 2 * np.hypot(ses[i], ses[i + 1]) for i in range(len(SCALES) - 1))
    ok = monotone and means[-1] >= 0.95 * reward.r_max
    curve = ", ".join(f"{lam}:{m:.3f}" for lam, m in zip(SCALES, means))
    verdict(request, 6, ok, f"mean reward by scale {curve} (R_max {reward.r_max:g})")


def test_criterion_7_tradeoff_dip(request, toy_sweep):
    _, rows = toy_sweep
    parts, ok = [], True
    for kind in ("L1", "TV", "SFD", "KL"):
        vals = [rows[lam][1][kind] for lam in SCALES]
        inner = vals[1:-1]
        best = int(np.argmin(inner)) + 1
        good = inner[best - 1] < vals[0] and inner[best - 1] < vals[-1]
        ok &= good
        parts.append(f"{kind} {vals[0]:.3g}->{vals[best]:.3g}@{SCALES[best]}->{vals[-1]:.3g}")
    verdict(request, 7, ok, "; ".join(parts))


# -- 8: metric unit checks -----------------------------------------------------------

def test_criterion_8_metric_units(request, fig1):
    checks = {}
    for n in (3, 4):
        paths = [(i,) for i in range(n)]
        w = np.arange(1, n + 1, dtype=float)
        p = EmpiricalPathDistribution.from_mass(dict(zip(paths, w)))
        q = EmpiricalPathDistribution.from_mass(dict(zip(paths, w[::-1])))
        checks[f"SFD reversed n={n}"] = abs(sfd(p, q) - 1.0) < 1e-12
    rng = np.random.default_rng(8)
    paths = np.array(enumerate_paths(fig1))
    s = paths[rng.integers(10, size=500)]
    other = paths[rng.integers(10, size=300)]
    p = EmpiricalPathDistribution.from_samples(s)
    checks["path divergences 0 on identical"] = all(divergence(p, p, k) == 0 for k in ("KL", "L1", "TV")) \
        and sfd(p, p) == 0
    checks["IS-L 0 on identical"] = all(isl(fig1, s, s, k) == 0 for k in ("L1", "KL", "TV", "SF"))
    fa = rng.normal(size=(400, 5))
    fb = rng.normal(size=(300, 5)) + 0.3
    checks["FLGD symmetric"] = abs(flgd(fa, fb) - flgd(fb, fa)) < 1e-6
    checks["FLGD 0 on identical"] = abs(flgd(fa, fa)) < 1e-6
    # the first layer is a single vertex, so its term must vanish: the total has to equal
    # an independent sum over layers 2..L only
    first_layer_zero = True
    for k in ("L1", "KL", "TV", "SF"):
        first_layer_zero &= abs(isl(fig1, s, other, k) - layers_after_first(fig1, s, other, k)) < 1e-12
    checks["IS-L layer-1 term 0"] = first_layer_zero
    failed = [name for name, good in checks.items() if not good]
    verdict(request, 8, not failed, "all metric checks hold" if not failed else f"failed: {failed}")


def layers_after_first(g, a, b, kind):
    eps = 1.0 / (10 * max(len(a), len(b)))
    total = 0.0
    for l, layer in enumerate(g.layers[1:], start=1):
        pa = np.array([np.mean(a[:, l] == v) for v in layer])
        pb = np.array([np.mean(b[:, l] == v) for v in layer])
        if kind == "L1":
            total += np.abs(pa - pb).sum()
        elif kind == "TV":
            total += np.abs(pa - pb).max()
        elif kind == "KL":
            pa, pb = (pa + eps) / (pa + eps).sum(), (pb + eps) / (pb + eps).sum()
            total += np.sum(pa * np.log(pa / pb))
        elif len(layer) > 1:
            total += sfd(EmpiricalPathDistribution(tuple((v,) for v in layer), pa),
                         EmpiricalPathDistribution(tuple((v,) for v in layer), pb))
    return total


# -- 9: round trips and determinism ------------------------------------------------------

def test_criterion_9_roundtrip_and_determinism(request, tmp_path):
    g = synth_pruned(TOY_WIDTHS, 0.5, seed=TOY_SEED)
    shape = PalmShape.from_graph(g)
    paths = np.array(enumerate_paths(g))
    roundtrip = all(
        np.array_equal(decode_indices(shape, encode_indices(shape, paths, np.random.default_rng(seed))), paths)
        for seed in range(10**4))

    def run(*argv):
        return cli_main([str(a) for a in argv])

    files = {}
    for name in ("a", "b"):
        d = tmp_path / name
        d.mkdir()
        assert run("graph", "gen", "--layers", 11, "--width", 4, "--prune", 0.5, "--seed", 1, "-o", d / "g.json") == 0
        assert run("dataset", "--graph", d / "g.json", "--mode", "sampled", "--count", 200, "--seed", 3,
                   "-o", d / "ds.txt") == 0
        assert run("train", "--graph", d / "g.json", "--dataset", d / "ds.txt", "--timesteps", 32,
                   "--epochs", 3, "--batch-size", 32, "--hidden", 32, "-o", d / "m.npz") == 0
        assert run("reward", "set", "--graph", d / "g.json", "--edge", g_edge(d / "g.json"), "-o", d / "r.json") == 0
        assert run("sample", "--graph", d / "g.json", "--checkpoint", d / "m.npz", "-n", 500, "--seed", 9,
                   "-o", d / "s.txt") == 0
        assert run("sample", "--graph", d / "g.json", "--checkpoint", d / "m.npz", "--reward", d / "r.json",
                   "--scale", 10, "-n", 500, "--seed", 9, "-o", d / "sg.txt") == 0
        files[name] = {f: (d / f).read_bytes() for f in ("g.json", "ds.txt", "m.loss.csv", "s.txt", "sg.txt")}
    identical = [f for f in files["a"] if files["a"][f] == files["b"][f]]
    ok = roundtrip and len(identical) == len(files["a"])
    verdict(request, 9, ok, f"decode(encode) identity on {len(paths)} paths x 10^4 seeds: {roundtrip}; "
                           f"byte-identical reruns: {', '.join(identical)}")


def g_edge(graph_path):
    g = load_graph(graph_path)
    v, w = g.edges()[len(g.edges()) // 2]
    return f"{g.labels[v]},{g.labels[w]}"
