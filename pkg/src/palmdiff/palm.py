"""Padded adjacency-list matrices (PALMs): path encoding, decoding and reward layout.

A PALM is a ``(V, D_max)`` 0/1 matrix. Row ``v`` one-hot selects one outgoing
edge of ``v`` among its first ``D_v`` entries; rows of sink vertices are all
zero. The batched helpers work on the equivalent index form: an integer array
``(..., V)`` holding the selected edge position, ``-1`` on sink rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .graph import LayeredGraph, is_valid_path


class MalformedPalm(ValueError):
    pass


class InvalidPath(ValueError):
    pass


class UnknownEdge(KeyError):
    pass


@dataclass(frozen=True, eq=False)
class PalmShape:
    degrees: np.ndarray
    max_degree: int
    successors: np.ndarray = field(repr=False)  # (V, D_max) destination ids, -1 on padding
    root: int = 0
    n_layers: int = 2

    @classmethod
    def from_graph(cls, g: LayeredGraph) -> "PalmShape":
        deg = g.degrees
        dmax = max(int(deg.max()), 1)
        succ = np.full((g.n_vertices, dmax), -1, dtype=np.int64)
        for v, a in enumerate(g.adjacency):
            succ[v, : len(a)] = a
        for arr in (deg, succ):
            arr.setflags(write=False)
        return cls(degrees=deg, max_degree=dmax, successors=succ, root=g.root, n_layers=g.n_layers)

    @property
    def n_vertices(self) -> int:
        return len(self.degrees)

    @property
    def mask(self) -> np.ndarray:
        """Boolean ``(V, D_max)`` mask of real (non-padding) entries."""
        return np.arange(self.max_degree)[None, :] < self.degrees[:, None]

    @property
    def active(self) -> np.ndarray:
        """Vertices with at least one outgoing edge."""
        return self.degrees > 0


def encode(g: LayeredGraph, path: Sequence[int], rng) -> np.ndarray:
    """PALM of ``path``; off-path rows get a uniformly random edge.

    Randomness is drawn only for off-path vertices with ``D_v > 0``, one
    ``rng.integers(D_v)`` call each, in ascending vertex order.
    """
    if not is_valid_path(g, path):
        raise InvalidPath(f"not a path: {tuple(path)}")
    shape = PalmShape.from_graph(g)
    x = np.zeros((g.n_vertices, shape.max_degree), dtype=np.uint8)
    chosen = {int(v): g.edge_index(int(v), int(u)) for v, u in zip(path[:-1], path[1:])}
    for v, d in enumerate(shape.degrees):
        if d == 0:
            continue
        j = chosen[v] if v in chosen else int(rng.integers(d))
        x[v, j] = 1
    return x


def encode_indices(shape: PalmShape, paths: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Batched :func:`encode` in index form. ``paths`` is ``(B, L)`` of vertex ids."""
    paths = np.asarray(paths, dtype=np.int64)
    B = paths.shape[0]
    deg = shape.degrees
    x = np.floor(rng.random((B, shape.n_vertices)) * np.maximum(deg, 1)).astype(np.int64)
    x[:, deg == 0] = -1
    src, dst = paths[:, :-1], paths[:, 1:]
    # position of dst among src's successors
    pos = np.argmax(shape.successors[src] == dst[..., None], axis=-1)
    np.put_along_axis(x, src, pos, axis=1)
    return x


def to_indices(shape: PalmShape, x: np.ndarray) -> np.ndarray:
    """One-hot PALM(s) ``(..., V, D_max)`` to index form, checking well-formedness."""
    x = np.asarray(x)
    mask = shape.mask
    if np.any(x[..., ~mask] != 0):
        raise MalformedPalm("non-zero padding entry")
    sums = x.sum(axis=-1)
    want = shape.active.astype(sums.dtype)
    if np.any(sums != want) or np.any((x != 0) & (x != 1)):
        raise MalformedPalm("active rows must be one-hot and sink rows zero")
    idx = np.argmax(x, axis=-1).astype(np.int64)
    idx[..., ~shape.active] = -1
    return idx


def to_onehot(shape: PalmShape, idx: np.ndarray) -> np.ndarray:
    idx = np.asarray(idx)
    out = np.zeros(idx.shape + (shape.max_degree,), dtype=np.uint8)
    np.put_along_axis(out, np.maximum(idx, 0)[..., None], 1, axis=-1)
    out[idx < 0] = 0
    return out


def decode_indices(shape: PalmShape, idx: np.ndarray) -> np.ndarray:
    """Trace paths from index-form PALMs ``(B, V)``; returns ``(B, L)`` vertex ids."""
    idx = np.asarray(idx, dtype=np.int64)
    B = idx.shape[0]
    out = np.empty((B, shape.n_layers), dtype=np.int64)
    v = np.full(B, shape.root, dtype=np.int64)
    out[:, 0] = v
    rows = np.arange(B)
    for l in range(1, shape.n_layers):
        v = shape.successors[v, idx[rows, v]]
        out[:, l] = v
    return out


def decode(g: LayeredGraph, x: np.ndarray) -> tuple[int, ...]:
    """Follow the selected edges from the root; the result is always a path of ``g``."""
    shape = PalmShape.from_graph(g)
    idx = to_indices(shape, x)
    return tuple(int(v) for v in decode_indices(shape, idx[None])[0])


def reward_palm(g: LayeredGraph, edge_rewards: Sequence[tuple[int, int, float]]) -> np.ndarray:
    """Per-edge rewards laid out as a ``(V, D_max)`` float matrix, zero on padding."""
    shape = PalmShape.from_graph(g)
    u = np.zeros((g.n_vertices, shape.max_degree), dtype=np.float64)
    for src, dst, value in edge_rewards:
        try:
            j = g.edge_index(int(src), int(dst))
        except (KeyError, IndexError):
            raise UnknownEdge((src, dst)) from None
        if not np.isfinite(value):
            raise ValueError(f"non-finite reward on edge {(src, dst)}")
        u[int(src), j] = float(value)
    return u


def path_rewards(g: LayeredGraph, u: np.ndarray, paths) -> np.ndarray:
    """Total edge reward of each path in ``paths`` (``(B, L)``)."""
    paths = np.asarray(paths, dtype=np.int64).reshape(-1, g.n_layers)
    if len(paths) == 0:
        return np.zeros(0)
    shape = PalmShape.from_graph(g)
    src, dst = paths[:, :-1], paths[:, 1:]
    pos = np.argmax(shape.successors[src] == dst[..., None], axis=-1)
    return u[src, pos].sum(axis=1)
