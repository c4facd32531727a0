"""Estimator-style front end: fit a path diffusion model, then draw (guided) samples."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state

from .denoiser import DenoiserConfig
from .diffusion import TrainConfig, TrainResult, load_checkpoint, save_checkpoint, sample_unguided, train
from .graph import Dataset, LayeredGraph, is_valid_path
from .guidance import GuidanceConfig, RewardSpec, guided_sample
from .palm import InvalidPath


def check_paths(g: LayeredGraph, X) -> np.ndarray:
    """Validate ``X`` as an ``(n, L)`` integer array of paths of ``g``."""
    X = check_array(X, dtype=np.int64, ensure_min_samples=1)
    if X.shape[1] != g.n_layers:
        raise ValueError(f"paths must have {g.n_layers} vertices, got {X.shape[1]}")
    bad = [i for i, p in enumerate(X) if not is_valid_path(g, p)]
    if bad:
        raise InvalidPath(f"{len(bad)} rows are not paths of the graph (first: row {bad[0]})")
    return X


def _seed(random_state) -> int:
    # everything downstream is seeded with plain ints
    if isinstance(random_state, (int, np.integer)):
        return int(random_state)
    return int(check_random_state(random_state).randint(2**31))


class PalmDiffusion(BaseEstimator):
    """Discrete diffusion over the paths of a fixed layered graph.

    ``fit`` takes an ``(n, L)`` array of vertex ids, one path per row;
    repeated rows act as sample weights. ``sample`` returns new paths, steered
    toward high reward when a :class:`RewardSpec` and a positive
    ``guidance_scale`` are given.
    """

    def __init__(self, graph: LayeredGraph, timesteps: int = 256, gamma: float = 1.0, epochs: int = 100,
                 max_steps: int | None = None, batch_size: int = 256, lr: float = 1e-3,
                 weight_decay: float = 0.01, hidden: int = 128, n_blocks: int = 2, time_dim: int = 32,
                 val_fraction: float = 0.0, random_state: int = 0):
        self.graph = graph
        self.timesteps = timesteps
        self.gamma = gamma
        self.epochs = epochs
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.hidden = hidden
        self.n_blocks = n_blocks
        self.time_dim = time_dim
        self.val_fraction = val_fraction
        self.random_state = random_state

    def _configs(self) -> tuple[TrainConfig, DenoiserConfig]:
        seed = _seed(self.random_state)
        tc = TrainConfig(timesteps=self.timesteps, gamma=self.gamma, epochs=self.epochs,
                         max_steps=self.max_steps, batch_size=self.batch_size, lr=self.lr,
                         weight_decay=self.weight_decay, seed=seed, val_fraction=self.val_fraction)
        dc = DenoiserConfig(hidden=self.hidden, n_blocks=self.n_blocks, time_dim=self.time_dim, seed=seed)
        return tc, dc

    def fit(self, X, y=None):
        X = check_paths(self.graph, X)
        tc, dc = self._configs()
        self._set_result(train(self.graph, Dataset(self.graph, [tuple(p) for p in X]), tc, dc))
        return self

    def _set_result(self, result: TrainResult) -> None:
        self.result_ = result
        self.model_ = result.model
        self.kernel_ = result.kernel
        self.history_ = result.history
        self.n_steps_ = result.steps

    def sample(self, n: int, reward: RewardSpec | None = None, guidance_scale: float = 0.0,
               posterior: str = "d3pm-posterior", random_state=None, batch_size: int = 8192) -> np.ndarray:
        """Draw ``n`` paths; ``(n, L)`` vertex ids."""
        check_is_fitted(self, "model_")
        if n < 0:
            raise ValueError("n must be >= 0")
        rng = np.random.default_rng(_seed(self.random_state if random_state is None else random_state))
        cfg = GuidanceConfig(guidance_scale, posterior)
        if reward is None:
            if guidance_scale != 0:
                raise ValueError("guidance needs a reward")
            return sample_unguided(self.model_, self.kernel_, n, rng, batch_size)
        paths, _ = guided_sample(self.graph, self.model_, self.kernel_, reward, cfg, n, rng, batch_size)
        return paths

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        save_checkpoint(path, self.graph, self.result_)

    @classmethod
    def load(cls, path, graph: LayeredGraph) -> "PalmDiffusion":
        result = load_checkpoint(path, graph)
        tc, dc = result.config, result.model.config
        est = cls(graph, timesteps=tc.timesteps, gamma=tc.gamma, epochs=tc.epochs, max_steps=tc.max_steps,
                  batch_size=tc.batch_size, lr=tc.lr, weight_decay=tc.weight_decay, hidden=dc.hidden,
                  n_blocks=dc.n_blocks, time_dim=dc.time_dim, val_fraction=tc.val_fraction,
                  random_state=tc.seed)
        est._set_result(result)
        return est
