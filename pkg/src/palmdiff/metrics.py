"""Sample quality and distribution distances between path samples."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import LayeredGraph, enumerate_paths, is_valid_path
from .palm import InvalidPath, PalmShape

DIVERGENCES = ("KL", "L1", "TV")
ISL_KINDS = ("L1", "KL", "TV", "SF")


class EmptySamples(ValueError):
    pass


class UndefinedMetric(ValueError):
    pass


class InsufficientSamples(ValueError):
    pass


class EmptyConditional(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class EmpiricalPathDistribution:
    """Distinct paths in canonical (lexicographic) order with their probabilities."""

    support: tuple[tuple[int, ...], ...]
    mass: np.ndarray
    n_samples: int = 0

    @classmethod
    def from_samples(cls, samples) -> "EmpiricalPathDistribution":
        counts = Counter(tuple(int(v) for v in s) for s in samples)
        support = tuple(sorted(counts))
        n = sum(counts.values())
        mass = np.array([counts[p] for p in support], dtype=np.float64) / max(n, 1)
        return cls(support, mass, n)

    @classmethod
    def from_mass(cls, mapping: dict, n_samples: int = 0) -> "EmpiricalPathDistribution":
        support = tuple(sorted(p for p, m in mapping.items() if m > 0))
        mass = np.array([mapping[p] for p in support], dtype=np.float64)
        return cls(support, mass / mass.sum(), n_samples)

    def as_dict(self) -> dict:
        return dict(zip(self.support, self.mass))


def _aligned(p: EmpiricalPathDistribution, q: EmpiricalPathDistribution):
    keys = sorted(set(p.support) | set(q.support))
    pd, qd = p.as_dict(), q.as_dict()
    return (np.array([pd.get(k, 0.0) for k in keys]), np.array([qd.get(k, 0.0) for k in keys]))


def smoothing_eps(n_p: int, n_q: int) -> float:
    n = max(n_p, n_q)
    return 1.0 / (10 * n) if n > 0 else 1e-12


def kl(p: np.ndarray, q: np.ndarray, eps: float) -> float:
    """KL(p || q) after adding ``eps`` to every entry of both vectors and renormalising."""
    p = (p + eps) / (p + eps).sum()
    q = (q + eps) / (q + eps).sum()
    return float(np.sum(p * np.log(p / q)))


def vector_divergence(p: np.ndarray, q: np.ndarray, kind: str, eps: float = 1e-12) -> float:
    if kind == "KL":
        return kl(p, q, eps)
    if kind == "L1":
        return float(np.abs(p - q).sum())
    if kind == "TV":
        # sup-norm form, not half the L1 distance
        return float(np.abs(p - q).max()) if len(p) else 0.0
    if kind == "SF":
        return footrule(p, q)
    raise ValueError(f"unknown divergence {kind!r}")


def divergence(p: EmpiricalPathDistribution, q: EmpiricalPathDistribution, kind: str) -> float:
    """KL(p||q), L1 or sup-norm TV between two path distributions on their union support."""
    a, b = _aligned(p, q)
    return vector_divergence(a, b, kind, smoothing_eps(p.n_samples, q.n_samples))


def half_l1(p: EmpiricalPathDistribution, q: EmpiricalPathDistribution) -> float:
    a, b = _aligned(p, q)
    return 0.5 * float(np.abs(a - b).sum())


def _ranks(mass: np.ndarray) -> np.ndarray:
    # descending mass, ties by ascending index (stable sort)
    order = np.argsort(-mass, kind="stable")
    pos = np.empty(len(mass), dtype=np.int64)
    pos[order] = np.arange(len(mass))
    return pos


def footrule(p: np.ndarray, q: np.ndarray) -> float:
    """Normalised Spearman footrule between the mass orderings of two aligned vectors."""
    n = len(p)
    if n < 2:
        raise UndefinedMetric(f"footrule needs a support of at least 2, got {n}")
    dist = np.abs(_ranks(np.asarray(p)) - _ranks(np.asarray(q))).sum()
    m = n * n / 2 if n % 2 == 0 else (n * n - 1) / 2
    return float(dist / m)


def sfd(p: EmpiricalPathDistribution, q: EmpiricalPathDistribution) -> float:
    a, b = _aligned(p, q)
    return footrule(a, b)


def valid_rate(g: LayeredGraph, samples: Sequence[Sequence[int]]) -> float:
    samples = list(samples)
    if not samples:
        raise EmptySamples("valid rate of an empty sample list")
    return 100.0 * sum(is_valid_path(g, s) for s in samples) / len(samples)


def layer_marginals(g: LayeredGraph, samples) -> list[np.ndarray]:
    """Vertex frequencies per layer, each over that layer's vertices in stored order."""
    samples = np.asarray(samples, dtype=np.int64).reshape(-1, g.n_layers)
    out = []
    for l, layer in enumerate(g.layers):
        pos = {v: i for i, v in enumerate(layer)}
        counts = np.zeros(len(layer))
        vals, cnt = np.unique(samples[:, l], return_counts=True)
        for v, c in zip(vals, cnt):
            counts[pos[int(v)]] += c
        out.append(counts / max(len(samples), 1))
    return out


def isl(g: LayeredGraph, samples_target, samples_gen, kind: str) -> float:
    """Layer imitation score: a per-layer distance between vertex marginals, summed over layers."""
    if kind not in ISL_KINDS:
        raise ValueError(f"unknown IS-L kind {kind!r}")
    a, b = layer_marginals(g, samples_target), layer_marginals(g, samples_gen)
    if len(np.asarray(samples_target)) == 0 or len(np.asarray(samples_gen)) == 0:
        raise EmptySamples("IS-L needs non-empty sample sets")
    eps = smoothing_eps(len(samples_target), len(samples_gen))
    total = 0.0
    for pa, pb in zip(a, b):
        if kind == "SF" and len(pa) < 2:
            continue
        total += vector_divergence(pa, pb, kind, eps)
    return total


def features(g: LayeredGraph, path: Sequence[int]) -> np.ndarray:
    """Flattened PALM of ``path`` with every off-path row zeroed (length ``V * D_max``)."""
    if not is_valid_path(g, path):
        raise InvalidPath(f"not a path: {tuple(path)}")
    shape = PalmShape.from_graph(g)
    x = np.zeros((g.n_vertices, shape.max_degree))
    for v, u in zip(path[:-1], path[1:]):
        x[int(v), g.edge_index(int(v), int(u))] = 1.0
    return x.reshape(-1)


def features_batch(g: LayeredGraph, paths) -> np.ndarray:
    paths = np.asarray(paths, dtype=np.int64).reshape(-1, g.n_layers)
    shape = PalmShape.from_graph(g)
    D = shape.max_degree
    src, dst = paths[:, :-1], paths[:, 1:]
    pos = np.argmax(shape.successors[src] == dst[..., None], axis=-1)
    out = np.zeros((len(paths), g.n_vertices * D))
    np.put_along_axis(out, src * D + pos, 1.0, axis=1)
    return out


def _sqrtm_psd(a: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh((a + a.T) / 2)
    return (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T


def flgd(feats_a, feats_b, ridge: float = 1e-6) -> float:
    """Fréchet distance between Gaussian fits of two feature sets.

    ``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2))`` with ``ridge * I``
    added to both covariances; the trace term is evaluated as
    ``Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2))`` so only symmetric square roots are needed.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    if b.ndim == 1:
        b = b[:, None]
    if len(a) < 2 or len(b) < 2:
        raise InsufficientSamples("FLGD needs at least two feature vectors per side")
    mu_a, mu_b = a.mean(0), b.mean(0)
    eye = np.eye(a.shape[1])
    s_a = np.atleast_2d(np.cov(a, rowvar=False)) + ridge * eye
    s_b = np.atleast_2d(np.cov(b, rowvar=False)) + ridge * eye
    ra = _sqrtm_psd(s_a)
    w = np.linalg.eigvalsh(ra @ s_b @ ra)
    tr_cross = np.sqrt(np.clip(w, 0.0, None)).sum()
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(s_a) + np.trace(s_b) - 2.0 * tr_cross)
    return max(val, 0.0)


def condition_on_max(samples, rewards, r_max: float, atol: float = 1e-9):
    """Keep the samples whose reward reaches ``r_max``; returns ``(kept, retention)``."""
    samples = np.asarray(samples)
    keep = np.abs(np.asarray(rewards) - r_max) <= atol
    if not keep.any():
        raise EmptyConditional(f"no sample out of {len(samples)} reached reward {r_max}")
    return samples[keep], float(keep.mean())


def target_distribution(g: LayeredGraph, model, kernel, reward, n: int, rng):
    """Unguided samples conditioned on maximal reward.

    Returns ``(distribution, kept_samples, retention)``.
    """
    from .diffusion import sample_unguided

    paths = sample_unguided(model, kernel, n, rng)
    kept, retention = condition_on_max(paths, reward.path_rewards(g, paths), reward.r_max)
    return EmpiricalPathDistribution.from_samples(kept), kept, retention


def exact_path_distribution(g: LayeredGraph, probs: np.ndarray | None = None, cap: int = 100_000):
    """Path probabilities when each vertex picks edges from ``probs`` (uniform if None), by enumeration."""
    shape = PalmShape.from_graph(g)
    if probs is None:
        probs = shape.mask / np.maximum(shape.degrees, 1)[:, None]
    out = {}
    for p in enumerate_paths(g, cap=cap):
        m = 1.0
        for v, u in zip(p[:-1], p[1:]):
            m *= probs[v, g.edge_index(v, u)]
        out[p] = m
    return out


@dataclass
class MetricsReport:
    values: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {**self.values, **self.counts}


def compare(g: LayeredGraph, target_samples, gen_samples, with_flgd: bool = True) -> MetricsReport:
    """Every path-level and feature-level distance between two sample sets."""
    pt = EmpiricalPathDistribution.from_samples(target_samples)
    pg = EmpiricalPathDistribution.from_samples(gen_samples)
    vals = {kind: divergence(pt, pg, kind) for kind in ("KL", "L1", "TV")}
    try:
        vals["SFD"] = sfd(pt, pg)
    except UndefinedMetric:
        vals["SFD"] = float("nan")
    for kind in ISL_KINDS:
        vals[f"IS-L-{kind}"] = isl(g, target_samples, gen_samples, kind)
    if with_flgd:
        vals["FLGD"] = flgd(features_batch(g, target_samples), features_batch(g, gen_samples))
    return MetricsReport(vals, {"n_target": pt.n_samples, "n_gen": pg.n_samples})
