"""Residual MLP that predicts clean-PALM logits from a noisy PALM and a timestep."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
from torch import nn

from .palm import PalmShape

DTYPE = torch.float64


@dataclass
class DenoiserConfig:
    hidden: int = 128
    n_blocks: int = 2
    time_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if min(self.hidden, self.n_blocks, self.time_dim) < 1:
            raise ValueError("denoiser sizes must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10_000.0) * torch.arange(half, dtype=DTYPE) / max(half, 1))
    args = t.to(DTYPE)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class _Block(nn.Module):
    def __init__(self, width: int):
        super().__init__()
        self.fc1 = nn.Linear(width, width, dtype=DTYPE)
        self.fc2 = nn.Linear(width, width, dtype=DTYPE)

    def forward(self, h):
        return h + self.fc2(nn.functional.silu(self.fc1(nn.functional.silu(h))))


class Denoiser(nn.Module):
    """``(x_t, t) -> logits`` over each vertex's outgoing edges.

    The input is the flattened one-hot PALM concatenated with the padding
    mask. Padding logits are ``-inf``. The output layer starts at zero, so an
    untrained model predicts the uniform distribution on every active row.
    """

    def __init__(self, shape: PalmShape, config: DenoiserConfig | None = None):
        super().__init__()
        self.shape = shape
        self.config = config or DenoiserConfig()
        V, D = shape.n_vertices, shape.max_degree
        H = self.config.hidden
        self.inp = nn.Linear(2 * V * D, H, dtype=DTYPE)
        self.time = nn.Linear(self.config.time_dim, H, dtype=DTYPE)
        self.blocks = nn.ModuleList(_Block(H) for _ in range(self.config.n_blocks))
        self.out = nn.Linear(H, V * D, dtype=DTYPE)
        self.register_buffer("mask", torch.as_tensor(shape.mask), persistent=False)
        self.reset_parameters()

    def reset_parameters(self):
        gen = torch.Generator().manual_seed(self.config.seed)
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                bound = 1.0 / math.sqrt(mod.in_features)
                with torch.no_grad():
                    mod.weight.uniform_(-bound, bound, generator=gen)
                    mod.bias.uniform_(-bound, bound, generator=gen)
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.zero_()

    def forward(self, x_idx: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        V, D = self.shape.n_vertices, self.shape.max_degree
        B = x_idx.shape[0]
        onehot = torch.zeros(B, V, D, dtype=DTYPE)
        onehot.scatter_(2, x_idx.clamp(min=0)[..., None], 1.0)
        onehot = onehot * self.mask
        # the mask channel is the same for every sample: one row through the layer
        mask_term = self.inp.weight[:, V * D:] @ self.mask.reshape(-1).to(DTYPE)
        h = onehot.reshape(B, -1) @ self.inp.weight[:, : V * D].T + self.inp.bias + mask_term
        steps, inverse = torch.unique(t, return_inverse=True)
        h = h + self.time(timestep_embedding(steps, self.config.time_dim))[inverse]
        for block in self.blocks:
            h = block(h)
        z = self.out(nn.functional.silu(h)).reshape(B, V, D)
        return z.masked_fill(~self.mask, float("-inf"))


def predict(model: Denoiser, x_idx, t) -> torch.Tensor:
    """Logits for index-form PALMs ``x_idx`` (``(B, V)``) at timesteps ``t``."""
    x_idx = torch.as_tensor(np.asarray(x_idx), dtype=torch.long)
    if x_idx.ndim != 2 or x_idx.shape[1] != model.shape.n_vertices:
        raise ValueError(f"expected (B, {model.shape.n_vertices}) PALM indices, got {tuple(x_idx.shape)}")
    t = torch.as_tensor(np.broadcast_to(np.asarray(t), (x_idx.shape[0],)).copy(), dtype=torch.long)
    return model(x_idx, t)


def make_optimizer(model, lr: float = 1e-3, weight_decay: float = 0.0):
    """AdamW over a module's parameters (or an explicit parameter list)."""
    params = model.parameters() if isinstance(model, nn.Module) else model
    return torch.optim.AdamW(params, lr=lr, weight_decay=weight_decay)


def update(optimizer: torch.optim.Optimizer) -> None:
    """One AdamW step from the gradients currently stored on the parameters."""
    for group in optimizer.param_groups:
        for p in group["params"]:
            if p.grad is not None and not torch.isfinite(p.grad).all():
                raise FloatingPointError("non-finite gradient")
    optimizer.step()


def flat_parameters(model: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}


def load_flat_parameters(model: nn.Module, params: dict[str, np.ndarray]) -> None:
    model.load_state_dict({k: torch.as_tensor(v) for k, v in params.items()})
