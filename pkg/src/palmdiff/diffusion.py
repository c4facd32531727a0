"""Discrete diffusion over PALM states: noise schedule, uniform kernels, loss, training, sampling.

States are handled in index form (``(B, V)`` integer arrays, ``-1`` on sink
rows, see :mod:`palmdiff.palm`). Distributions are ``(B, V, D_max)`` float64
tensors that are zero on padding.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path as FsPath
from typing import Callable

import numpy as np
import torch

from ._lastaxis import lcumsum, lmax, lsum
from .denoiser import DTYPE, Denoiser, DenoiserConfig, flat_parameters, load_flat_parameters, make_optimizer, update
from .graph import Dataset, LayeredGraph
from .palm import PalmShape, decode_indices, encode_indices

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT_VERSION = 1


class NonFiniteLoss(FloatingPointError):
    pass


class FingerprintMismatch(ValueError):
    pass


# -- schedule and kernels ----------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """``betas[t]`` and ``alpha_bar[t]`` for ``t = 0..T`` (``betas[0] = 0``, ``alpha_bar[0] = 1``)."""

    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def T(self) -> int:
        return len(self.betas) - 1


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    if T < 1 or s <= 0:
        raise ValueError("need T >= 1 and s > 0")
    steps = np.arange(T + 1, dtype=np.float64)
    f = np.cos(((steps / T) + s) / (1 + s) * np.pi / 2) ** 2
    ab = f / f[0]
    betas = np.zeros(T + 1)
    betas[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    # recompute from the clipped betas so the cumulative kernel stays exact
    alpha_bar = np.cumprod(1.0 - betas)
    for arr in (betas, alpha_bar):
        arr.setflags(write=False)
    return NoiseSchedule(betas, alpha_bar)


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    shape: PalmShape
    schedule: NoiseSchedule

    @property
    def T(self) -> int:
        return self.schedule.T

    def _block(self, keep: float, v: int) -> np.ndarray:
        D = self.shape.max_degree
        d = int(self.shape.degrees[v])
        if d == 0:
            return np.eye(D)
        m = np.zeros((D, D))
        m[:d, :d] = keep * np.eye(d) + (1.0 - keep) / d
        return m

    def step_matrix(self, t: int, v: int) -> np.ndarray:
        """Single-step matrix ``Q_t`` of vertex ``v`` (``(D_max, D_max)``)."""
        return self._block(1.0 - self.schedule.betas[t], v)

    def cumulative_matrix(self, t: int, v: int) -> np.ndarray:
        """``Q_1 ... Q_t`` of vertex ``v`` from the closed form."""
        return self._block(self.schedule.alpha_bar[t], v)

    # torch helpers on batches -------------------------------------------------

    @cached_property
    def _uniform(self) -> torch.Tensor:
        deg = torch.tensor(self.shape.degrees, dtype=DTYPE).clamp(min=1)
        return torch.tensor(self.shape.mask, dtype=DTYPE) / deg[:, None]

    @cached_property
    def _betas(self) -> torch.Tensor:
        return torch.tensor(self.schedule.betas, dtype=DTYPE)

    @cached_property
    def _alpha_bar(self) -> torch.Tensor:
        return torch.tensor(self.schedule.alpha_bar, dtype=DTYPE)

    def step_likelihood(self, x_t: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """``q(x_t | x_{t-1} = k)`` for every category ``k``: the ``x_t`` column of ``Q_t``."""
        beta = self._betas[t][:, None, None]
        return (1.0 - beta) * onehot(self.shape, x_t) + beta * self._uniform

    def marginal(self, probs0: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        """Distribution of ``x_t`` given a distribution over ``x_0``: ``Q̄_t p``."""
        ab = self._alpha_bar[t][:, None, None]
        return ab * probs0 + (1.0 - ab) * self._uniform


def onehot(shape: PalmShape, idx) -> torch.Tensor:
    idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
    out = torch.zeros(idx.shape + (shape.max_degree,), dtype=DTYPE)
    out.scatter_(-1, idx.clamp(min=0)[..., None], 1.0)
    return out * (idx >= 0)[..., None]


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    z = logits.masked_fill(~mask, float("-inf"))
    # clamp: fully masked rows give exp(-inf) = 0 instead of nan
    m = lmax(z).detach().clamp(min=-1e300)
    e = torch.exp(z - m)
    return e / lsum(e).clamp(min=1e-300)


def normalize(p: torch.Tensor) -> torch.Tensor:
    return p / lsum(p).clamp(min=1e-300)


def _as_t(t, B: int) -> torch.Tensor:
    return torch.as_tensor(np.broadcast_to(np.asarray(t), (B,)).copy(), dtype=torch.long)


# -- forward process ---------------------------------------------------------

def q_sample(kernel: TransitionKernel, x0: np.ndarray, t, rng: np.random.Generator) -> np.ndarray:
    """Draw ``x_t ~ Cat(Q̄_t x_0)`` row by row (index form, batched)."""
    x0 = np.asarray(x0, dtype=np.int64)
    B = x0.shape[0]
    ab = kernel.schedule.alpha_bar[np.broadcast_to(np.asarray(t), (B,))][:, None]
    deg = kernel.shape.degrees
    keep = rng.random(x0.shape) < ab
    fresh = np.floor(rng.random(x0.shape) * np.maximum(deg, 1)).astype(np.int64)
    x_t = np.where(keep, x0, fresh)
    x_t[:, deg == 0] = -1
    return x_t


def q_posterior(kernel: TransitionKernel, x_t, x0, t) -> torch.Tensor:
    """``q(x_{t-1} | x_t, x_0)`` for ``t >= 2``; ``x0`` may be indices or a distribution."""
    x_t = torch.as_tensor(np.asarray(x_t), dtype=torch.long)
    B = x_t.shape[0]
    t = _as_t(t, B)
    assert bool((t >= 2).all()), "q_posterior needs t >= 2"
    p0 = x0 if torch.is_tensor(x0) and x0.is_floating_point() else onehot(kernel.shape, x0)
    post = normalize(kernel.step_likelihood(x_t, t) * kernel.marginal(p0, t - 1))
    assert bool((post.sum(-1)[:, kernel.shape.active] > 0).all()), "degenerate posterior normaliser"
    return post


def posterior_from_x0_probs(kernel: TransitionKernel, x_t, p0: torch.Tensor, t) -> torch.Tensor:
    """``p(x_{t-1} | x_t) ∝ Σ_x0 q(x_{t-1}, x_t | x0) p0(x0)``; returns ``p0`` itself where ``t = 1``."""
    x_t = torch.as_tensor(np.asarray(x_t), dtype=torch.long)
    t = _as_t(t, x_t.shape[0])
    tm1 = (t - 1).clamp(min=0)
    post = normalize(kernel.step_likelihood(x_t, t) * kernel.marginal(p0, tm1))
    return torch.where((t == 1)[:, None, None], p0, post)


def model_posterior(model: Denoiser, kernel: TransitionKernel, x_t, t) -> torch.Tensor:
    x_t = torch.as_tensor(np.asarray(x_t), dtype=torch.long)
    t = _as_t(t, x_t.shape[0])
    p0 = masked_softmax(model(x_t, t), model.mask)
    return posterior_from_x0_probs(kernel, x_t, p0, t)


# -- loss --------------------------------------------------------------------

def on_path_mask(shape: PalmShape, paths: np.ndarray) -> np.ndarray:
    """Boolean ``(B, V)``: on-path vertices that choose an edge (last-layer vertex excluded)."""
    paths = np.asarray(paths, dtype=np.int64)
    m = np.zeros((paths.shape[0], shape.n_vertices), dtype=bool)
    np.put_along_axis(m, paths[:, :-1], True, axis=1)
    return m


def _kl(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    return (torch.xlogy(q, q) - torch.xlogy(q, p)).sum(-1)


def loss_terms(model: Denoiser, kernel: TransitionKernel, x0, x_t, t, on_path, gamma: float = 1.0):
    """Per-example ``(total, vb, ce)`` tensors of ``gamma * L_vb + CE`` restricted to ``on_path``."""
    x0 = torch.as_tensor(np.asarray(x0), dtype=torch.long)
    x_t = torch.as_tensor(np.asarray(x_t), dtype=torch.long)
    on_path = torch.as_tensor(np.asarray(on_path), dtype=torch.bool)
    B = x0.shape[0]
    t = _as_t(t, B)
    mask = model.mask
    logits = model(x_t, t)
    z = logits.masked_fill(~mask, float("-inf"))
    logp0 = torch.log_softmax(torch.where(mask.any(-1, keepdim=True), z, torch.zeros_like(z)), dim=-1)
    ce_v = -logp0.gather(-1, x0.clamp(min=0)[..., None])[..., 0]
    ce_v = torch.where(on_path, ce_v, torch.zeros_like(ce_v))
    ce = ce_v.sum(-1)

    p0 = masked_softmax(logits, mask)
    x0_hot = onehot(kernel.shape, x0)
    tt = torch.maximum(t, torch.full_like(t, 2))
    q_true = normalize(kernel.step_likelihood(x_t, tt) * kernel.marginal(x0_hot, tt - 1))
    p_model = normalize(kernel.step_likelihood(x_t, tt) * kernel.marginal(p0, tt - 1))
    # padding entries would give 0/0 in the KL gradient
    q_true = torch.where(mask, q_true, torch.zeros_like(q_true))
    p_model = torch.where(mask, p_model, torch.ones_like(p_model))
    kl_v = torch.where(on_path, _kl(q_true, p_model), torch.zeros_like(ce_v))
    vb = torch.where(t == 1, ce, kl_v.sum(-1))
    return gamma * vb + ce, vb, ce


def loss(model, kernel, x0, on_path, t, rng: np.random.Generator, gamma: float = 1.0):
    """Mean loss over the batch, drawing ``x_t`` from the forward process."""
    x_t = q_sample(kernel, x0, t, rng)
    total, _, _ = loss_terms(model, kernel, x0, x_t, t, on_path, gamma)
    return total.mean()


def gradient_of_loss(model: Denoiser, kernel: TransitionKernel, batch, gamma: float = 1.0) -> list[torch.Tensor]:
    """Reverse-mode gradient of the mean loss over ``batch`` = ``(x_t, t, x0, on_path)``."""
    x_t, t, x0, on_path = batch
    params = list(model.parameters())
    if len(np.asarray(x0)) == 0:
        return [torch.zeros_like(p) for p in params]
    total, _, _ = loss_terms(model, kernel, x0, x_t, t, on_path, gamma)
    return list(torch.autograd.grad(total.mean(), params))


# -- training ----------------------------------------------------------------

@dataclass
class TrainConfig:
    timesteps: int = 256
    gamma: float = 1.0
    epochs: int = 100
    max_steps: int | None = None
    batch_size: int = 256
    lr: float = 1e-3
    weight_decay: float = 0.01
    seed: int = 0
    val_fraction: float = 0.0

    def __post_init__(self):
        if self.gamma < 0 or self.timesteps < 1:
            raise ValueError("need gamma >= 0 and timesteps >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    model: Denoiser
    kernel: TransitionKernel
    optimizer: torch.optim.Optimizer
    config: TrainConfig
    history: list[dict] = field(default_factory=list)
    steps: int = 0


def _evaluate(model, kernel, paths, gamma, rng, batch_size):
    shape = kernel.shape
    tot = ce = n_v = 0.0
    with torch.no_grad():
        for i in range(0, len(paths), batch_size):
            p = paths[i:i + batch_size]
            x0 = encode_indices(shape, p, rng)
            t = rng.integers(1, kernel.T + 1, size=len(p))
            x_t = q_sample(kernel, x0, t, rng)
            mask = on_path_mask(shape, p)
            total, _, c = loss_terms(model, kernel, x0, x_t, t, mask, gamma)
            tot += float(total.sum())
            ce += float(c.sum())
            n_v += mask.sum()
    return tot / max(len(paths), 1), float(ce / max(n_v, 1))


def train(g: LayeredGraph, dataset: Dataset, config: TrainConfig | None = None,
          denoiser: DenoiserConfig | None = None, callback: Callable | None = None) -> TrainResult:
    """Fit a denoiser to the paths of ``dataset`` with AdamW.

    Every time a path is drawn it is re-encoded with fresh off-path edges and
    a uniformly drawn timestep. ``history`` holds one row per epoch with the
    mean train/validation loss and the masked cross-entropy per on-path vertex.
    """
    config = config or TrainConfig()
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    shape = PalmShape.from_graph(g)
    kernel = TransitionKernel(shape, cosine_schedule(config.timesteps))
    model = Denoiser(shape, denoiser or DenoiserConfig(seed=config.seed))
    opt = make_optimizer(model, config.lr, config.weight_decay)
    result = TrainResult(model, kernel, opt, config)

    if config.val_fraction > 0:
        train_set, val_set = dataset.split(config.val_fraction, config.seed)
    else:
        train_set, val_set = dataset, None
    paths = train_set.as_array()
    val_paths = val_set.as_array() if val_set is not None and len(val_set) else None
    rng = np.random.default_rng([config.seed, 1])
    n = len(paths)
    step = 0
    for epoch in range(config.epochs):
        if config.max_steps is not None and step >= config.max_steps:
            break
        order = rng.permutation(n)
        ep_loss = ep_ce = ep_v = 0.0
        seen = 0
        for i in range(0, n, config.batch_size):
            if config.max_steps is not None and step >= config.max_steps:
                break
            p = paths[order[i:i + config.batch_size]]
            x0 = encode_indices(shape, p, rng)
            t = rng.integers(1, kernel.T + 1, size=len(p))
            x_t = q_sample(kernel, x0, t, rng)
            mask = on_path_mask(shape, p)
            total, _, ce = loss_terms(model, kernel, x0, x_t, t, mask, config.gamma)
            batch_loss = total.mean()
            if not torch.isfinite(batch_loss):
                raise NonFiniteLoss(f"loss={float(batch_loss)} at epoch {epoch} step {step} "
                                    f"(t range {t.min()}..{t.max()})")
            opt.zero_grad()
            batch_loss.backward()
            update(opt)
            step += 1
            ep_loss += float(total.detach().sum())
            ep_ce += float(ce.detach().sum())
            ep_v += mask.sum()
            seen += len(p)
        row = {"epoch": epoch, "step": step, "train_loss": ep_loss / max(seen, 1),
               "train_ce": float(ep_ce / max(ep_v, 1))}
        if val_paths is not None:
            vrng = np.random.default_rng([config.seed, 2])
            row["val_loss"], row["val_ce"] = _evaluate(model, kernel, val_paths, config.gamma,
                                                       vrng, config.batch_size)
        result.history.append(row)
        if callback is not None:
            callback(row)
        log.debug("epoch %d step %d loss %.5f ce %.5f", epoch, step, row["train_loss"], row["train_ce"])
    result.steps = step
    return result


# -- sampling ----------------------------------------------------------------

Guide = Callable[[torch.Tensor, torch.Tensor, np.ndarray, int], torch.Tensor]


def sample_categorical(probs: np.ndarray, degrees: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF draw per row of ``(B, V, D)`` probabilities; ``-1`` on sink rows."""
    cum = lcumsum(probs)
    u = rng.random(probs.shape[:-1]) * cum[..., -1]
    idx = np.zeros(probs.shape[:-1], dtype=np.int64)
    for j in range(probs.shape[-1] - 1):
        idx += cum[..., j] <= u
    idx = np.minimum(idx, np.maximum(degrees, 1) - 1)
    idx[..., degrees == 0] = -1
    return idx


def _state_radix(degrees: np.ndarray) -> np.ndarray | None:
    """Mixed-radix weights turning a PALM into one int64 key, or None if keys could overflow."""
    base = np.maximum(degrees, 1).astype(np.int64)
    if np.sum(np.log2(base)) >= 62:
        return None
    return np.concatenate([np.cumprod(base[::-1])[::-1][1:], [1]]).astype(np.int64)


def _distinct_rows(x: np.ndarray, radix: np.ndarray | None):
    """Indices of distinct rows and the map back to all rows; ``(all, None)`` when not worth it."""
    if radix is None:
        return np.arange(len(x)), None
    keys = np.maximum(x, 0) @ radix
    _, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    if 2 * len(first) > len(x):
        return np.arange(len(x)), None
    return first, inverse


def reverse_chain(model: Denoiser, kernel: TransitionKernel, n: int, rng: np.random.Generator,
                  batch_size: int = 8192, step_probs: Callable | None = None) -> np.ndarray:
    """Run the reverse process for ``n`` chains and return the final index-form PALMs.

    ``step_probs(logits, x_t, t)`` may replace the default posterior; it must
    return ``(B, V, D)`` probabilities of ``x_{t-1}``.
    """
    shape = kernel.shape
    deg = shape.degrees
    out = np.empty((n, shape.n_vertices), dtype=np.int64)
    radix = _state_radix(deg)
    model.eval()
    with torch.no_grad():
        for start in range(0, n, batch_size):
            B = min(batch_size, n - start)
            x = np.floor(rng.random((B, shape.n_vertices)) * np.maximum(deg, 1)).astype(np.int64)
            x[:, deg == 0] = -1
            for t in range(kernel.T, 0, -1):
                # the step depends on x_t only, so identical chains share one evaluation
                rows, inverse = _distinct_rows(x, radix)
                xt = torch.as_tensor(x[rows])
                tt = _as_t(t, len(rows))
                logits = model(xt, tt)
                if step_probs is None:
                    probs = posterior_from_x0_probs(kernel, xt, masked_softmax(logits, model.mask), tt)
                else:
                    probs = step_probs(logits, xt, t)
                probs = probs.numpy()
                x = sample_categorical(probs if inverse is None else probs[inverse], deg, rng)
            out[start:start + B] = x
    return out


def sample_unguided(model: Denoiser, kernel: TransitionKernel, n: int, rng: np.random.Generator,
                    batch_size: int = 8192) -> np.ndarray:
    """``n`` paths (``(n, L)`` vertex ids) from the learned reverse process."""
    if n == 0:
        return np.zeros((0, kernel.shape.n_layers), dtype=np.int64)
    x0 = reverse_chain(model, kernel, n, rng, batch_size)
    return decode_indices(kernel.shape, x0)


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, g: LayeredGraph, result: TrainResult) -> None:
    model, opt = result.model, result.optimizer
    meta = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "graph_fingerprint": g.fingerprint(),
        "palm_shape": {"degrees": model.shape.degrees.tolist(), "max_degree": model.shape.max_degree},
        "train_config": result.config.to_dict(),
        "denoiser_config": model.config.to_dict(),
        "steps": result.steps,
        "history": result.history,
    }
    arrays = {f"param/{k}": v for k, v in flat_parameters(model).items()}
    names = [n for n, _ in model.named_parameters()]
    for name, p in zip(names, model.parameters()):
        st = opt.state.get(p, {})
        for key in ("exp_avg", "exp_avg_sq", "step"):
            if key in st:
                arrays[f"opt/{name}/{key}"] = torch.as_tensor(st[key]).detach().numpy()
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path, g: LayeredGraph) -> TrainResult:
    """Load a checkpoint written by :func:`save_checkpoint`; the graph must match its fingerprint."""
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        arrays = {k: data[k] for k in data.files if k != "meta"}
    if meta.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format_version {meta.get('format_version')!r}")
    if meta["graph_fingerprint"] != g.fingerprint():
        raise FingerprintMismatch("checkpoint was trained on a different graph")
    shape = PalmShape.from_graph(g)
    config = TrainConfig(**meta["train_config"])
    model = Denoiser(shape, DenoiserConfig(**meta["denoiser_config"]))
    load_flat_parameters(model, {k[6:]: v for k, v in arrays.items() if k.startswith("param/")})
    opt = make_optimizer(model, config.lr, config.weight_decay)
    for name, p in model.named_parameters():
        if f"opt/{name}/step" in arrays:
            opt.state[p] = {key: torch.as_tensor(arrays[f"opt/{name}/{key}"])
                            for key in ("exp_avg", "exp_avg_sq", "step")}
    kernel = TransitionKernel(shape, cosine_schedule(config.timesteps))
    return TrainResult(model, kernel, opt, config, meta.get("history", []), meta.get("steps", 0))
