"""Expected path reward over PALM distributions, its logit gradient, and reward-guided sampling.

The expected reward is a forward sweep over layers: the probability of
reaching each vertex is pushed along edges weighted by the per-vertex edge
probabilities, and every vertex contributes its reach probability times its
expected immediate edge reward. The gradient is the matching backward sweep,
where the adjoint of a vertex is its expected reward-to-go.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path as FsPath
from typing import Sequence

import numpy as np
import torch

from ._lastaxis import lmax, lsum
from .diffusion import TransitionKernel, masked_softmax, posterior_from_x0_probs, reverse_chain
from .graph import LayeredGraph
from .palm import PalmShape, decode_indices, path_rewards, reward_palm

REWARD_FORMAT_VERSION = 1
POSTERIOR_MODES = ("d3pm-posterior", "paper-literal")
LOG_FLOOR = -80.0


@dataclass(frozen=True, eq=False)
class _Sweep:
    """Per-layer edge lists of a graph, precomputed for vectorised sweeps."""

    shape: PalmShape
    layer_src: tuple[np.ndarray, ...]      # vertices of each non-final layer
    layer_succ: tuple[np.ndarray, ...]     # (n_l, D) successors, V on padding
    layer_edges: tuple[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray], ...]


@lru_cache(maxsize=32)
def _sweep_for(g: LayeredGraph) -> _Sweep:
    shape = PalmShape.from_graph(g)
    V = g.n_vertices
    srcs, succs, edges = [], [], []
    for layer in g.layers[:-1]:
        src = np.asarray(layer, dtype=np.int64)
        succ = shape.successors[src].copy()
        succ[succ < 0] = V
        ev, ej, eu = [], [], []
        for v in layer:
            for j, u in enumerate(g.adjacency[v]):
                ev.append(v)
                ej.append(j)
                eu.append(u)
        ev, ej, eu = (np.asarray(a, dtype=np.int64) for a in (ev, ej, eu))
        order = np.argsort(eu, kind="stable")
        ev, ej, eu = ev[order], ej[order], eu[order]
        dst, starts = np.unique(eu, return_index=True)
        srcs.append(src)
        succs.append(succ)
        edges.append((ev, ej, eu, dst, starts))
    return _Sweep(shape, tuple(srcs), tuple(succs), tuple(edges))


def softmax_rows(z: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Normalised exponentials over the active entries of each row; zero elsewhere."""
    z = z + np.where(mask, 0.0, -np.inf)
    # rows with no active entry have max -inf; the clamp keeps them at exp(-inf) = 0
    m = np.maximum(lmax(z), -1e300)
    e = np.exp(z - m)
    return e / np.maximum(lsum(e), 1e-300)


def _batch(a: np.ndarray) -> tuple[np.ndarray, tuple]:
    a = np.asarray(a, dtype=np.float64)
    lead = a.shape[:-2]
    return a.reshape((-1,) + a.shape[-2:]), lead


def transit_probs(g: LayeredGraph, probs: np.ndarray) -> np.ndarray:
    """Probability of visiting each vertex when every vertex picks its edge from ``probs``.

    ``probs`` is ``(..., V, D_max)``; the result is ``(..., V)``.
    """
    P, lead = _batch(probs)
    sw = _sweep_for(g)
    B = P.shape[0]
    p = np.zeros((B, g.n_vertices))
    p[:, g.root] = 1.0
    for ev, ej, eu, dst, starts in sw.layer_edges:
        if len(ev) == 0:
            continue
        flow = p[:, ev] * P[:, ev, ej]
        p[:, dst] = np.add.reduceat(flow, starts, axis=1)
    return p.reshape(lead + (g.n_vertices,))


def expected_reward(g: LayeredGraph, z: np.ndarray, u: np.ndarray) -> np.ndarray | float:
    """Expected total edge reward when each vertex picks edges by ``softmax(z)``.

    ``z`` holds logits ``(..., V, D_max)``; padding entries are ignored.
    """
    Z, lead = _batch(z)
    mask = _sweep_for(g).shape.mask
    P = softmax_rows(Z, mask)
    p = transit_probs(g, P)
    r = (p * lsum(P * u, keepdims=False)).sum(-1)
    return float(r[0]) if lead == () else r.reshape(lead)


def reward_to_go(g: LayeredGraph, probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Expected reward collected from each vertex onward, ``(B, V)`` for ``(B, V, D)`` probs."""
    sw = _sweep_for(g)
    B = probs.shape[0]
    V = g.n_vertices
    a = np.zeros((B, V + 1))
    for src, succ in zip(reversed(sw.layer_src), reversed(sw.layer_succ)):
        pr = probs[:, src, :]
        a[:, src] = lsum(pr * (u[src] + a[:, succ]), keepdims=False)
    return a[:, :V]


def reward_gradient(g: LayeredGraph, z: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Exact gradient of :func:`expected_reward` with respect to every logit in ``z``.

    With reach probabilities ``p`` and reward-to-go ``a``, the derivative
    with respect to edge probability ``(v, j)`` is ``p_v (u_vj + a_succ)``;
    the softmax Jacobian of each row maps it back to logits. Padding gets 0.
    """
    Z, lead = _batch(z)
    grad = _logit_gradient(g, softmax_rows(Z, _sweep_for(g).shape.mask), u)
    return grad.reshape(lead + grad.shape[-2:])


def _logit_gradient(g: LayeredGraph, P: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Logit gradient of the expected reward given the row probabilities ``P`` (``(B, V, D)``)."""
    sw = _sweep_for(g)
    p = transit_probs(g, P)
    a = reward_to_go(g, P, u)
    a_ext = np.concatenate([a, np.zeros((a.shape[0], 1))], axis=1)
    succ = sw.shape.successors.copy()
    succ[succ < 0] = g.n_vertices
    w = p[:, :, None] * (u[None] + a_ext[:, succ]) * sw.shape.mask
    # P is exactly zero on padding, so the padding gradient is zero too
    return P * (w - lsum(P * w))


def max_reward(g: LayeredGraph, u: np.ndarray) -> float:
    """Largest total reward of any path (max-plus version of the layer sweep)."""
    sw = _sweep_for(g)
    V = g.n_vertices
    best = np.full(V + 1, -np.inf)
    best[list(g.layers[-1])] = 0.0
    mask = sw.shape.mask
    for src, succ in zip(reversed(sw.layer_src), reversed(sw.layer_succ)):
        cand = np.where(mask[src], u[src] + best[succ], -np.inf)
        best[src] = cand.max(axis=-1) if cand.shape[-1] else -np.inf
    return float(best[g.root])


@dataclass(frozen=True, eq=False)
class RewardSpec:
    u: np.ndarray
    r_max: float
    label: str = ""
    edges: tuple[tuple[int, int, float], ...] = ()

    @classmethod
    def from_edges(cls, g: LayeredGraph, edges: Sequence[tuple[int, int, float]], label: str = "") -> "RewardSpec":
        edges = tuple((int(s), int(d), float(v)) for s, d, v in edges)
        u = reward_palm(g, edges)
        u.setflags(write=False)
        return cls(u, max_reward(g, u), label, edges)

    def path_rewards(self, g: LayeredGraph, paths) -> np.ndarray:
        return path_rewards(g, self.u, paths)

    def to_dict(self, g: LayeredGraph) -> dict:
        return {"format_version": REWARD_FORMAT_VERSION, "label": self.label,
                "edges": [[g.labels[s], g.labels[d], v] for s, d, v in self.edges]}


def reward_from_dict(g: LayeredGraph, doc: dict) -> RewardSpec:
    if doc.get("format_version") != REWARD_FORMAT_VERSION:
        raise ValueError(f"unsupported reward format_version {doc.get('format_version')!r}")
    edges = [(g.vertex(s), g.vertex(d), float(v)) for s, d, v in doc["edges"]]
    return RewardSpec.from_edges(g, edges, doc.get("label", ""))


def load_reward(g: LayeredGraph, path) -> RewardSpec:
    return reward_from_dict(g, json.loads(FsPath(path).read_text()))


def save_reward(g: LayeredGraph, spec: RewardSpec, path) -> None:
    FsPath(path).write_text(json.dumps(spec.to_dict(g), indent=1) + "\n")


def random_reward(g: LayeredGraph, n_edges: int, seed: int = 0, label: str = "") -> RewardSpec:
    """Binary reward on ``n_edges`` distinct edges whose source is reachable from the root."""
    shape = PalmShape.from_graph(g)
    reach = transit_probs(g, softmax_rows(np.zeros(shape.mask.shape), shape.mask)) > 0
    pool = [(v, w) for v, w in g.edges() if reach[v]]
    if n_edges > len(pool):
        raise ValueError(f"only {len(pool)} reachable edges")
    rng = np.random.default_rng(seed)
    pick = sorted(rng.choice(len(pool), size=n_edges, replace=False).tolist())
    return RewardSpec.from_edges(g, [(*pool[i], 1.0) for i in pick], label or f"random-{n_edges}-{seed}")


@dataclass
class GuidanceConfig:
    scale: float = 0.0
    posterior: str = "d3pm-posterior"

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0:
            raise ValueError("guidance scale must be finite and >= 0")
        if self.posterior not in POSTERIOR_MODES:
            raise ValueError(f"posterior must be one of {POSTERIOR_MODES}")


def guided_step(g: LayeredGraph, kernel: TransitionKernel, u: np.ndarray, cfg: GuidanceConfig):
    """Build the ``step_probs`` hook of :func:`reverse_chain` for reward guidance."""
    mask_t = torch.as_tensor(kernel.shape.mask)

    def step(logits: torch.Tensor, x_t: torch.Tensor, t: int) -> torch.Tensor:
        p0 = masked_softmax(logits, mask_t)
        tt = torch.full((x_t.shape[0],), t, dtype=torch.long)
        if cfg.posterior == "d3pm-posterior":
            base = posterior_from_x0_probs(kernel, x_t, p0, tt)
        else:
            base = kernel.marginal(p0, tt)
        grad = _logit_gradient(g, p0.numpy(), u)
        # floor the log-probabilities so impossible states stay finite
        logp = np.log(np.maximum(base.numpy(), np.exp(LOG_FLOOR)))
        return torch.as_tensor(softmax_rows(logp + cfg.scale * grad, kernel.shape.mask))

    return step


def guided_sample(g: LayeredGraph, model, kernel: TransitionKernel, reward: RewardSpec,
                  cfg: GuidanceConfig, n: int, rng: np.random.Generator,
                  batch_size: int = 8192) -> tuple[np.ndarray, np.ndarray]:
    """Reward-guided samples ``(n, L)`` and their rewards.

    With scale 0 in ``d3pm-posterior`` mode this is the unguided sampler and
    consumes randomness identically, so equal seeds give equal samples.
    """
    if n == 0:
        return np.zeros((0, g.n_layers), dtype=np.int64), np.zeros(0)
    hook = None
    if cfg.scale != 0.0 or cfg.posterior != "d3pm-posterior":
        hook = guided_step(g, kernel, np.asarray(reward.u), cfg)
    x0 = reverse_chain(model, kernel, n, rng, batch_size, step_probs=hook)
    paths = decode_indices(kernel.shape, x0)
    return paths, reward.path_rewards(g, paths)
