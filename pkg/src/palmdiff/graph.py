"""Layered graphs, paths, exact enumeration, synthetic graphs and path datasets."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path as FsPath
from typing import Iterable, Sequence

import numpy as np

GRAPH_FORMAT_VERSION = 1
DATASET_FORMAT_VERSION = 1


class InvalidGraphError(ValueError):
    """Raised when an operation needs a layered graph and gets something else."""


class PathCountExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"path enumeration aborted after {count} paths (cap={cap})")
        self.count = count
        self.cap = cap


class SynthesisFailed(RuntimeError):
    pass


class InvalidDataset(ValueError):
    pass


class CountTooLarge(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LayeredGraph:
    """A candidate layered graph with dense integer vertex ids.

    ``layers[l]`` lists the vertex ids of layer ``l`` (0-based here) and
    ``adjacency[v]`` the destinations of ``v`` sorted ascending. Construction
    does not check the layered-graph conditions; see :func:`validate`.
    """

    layers: tuple[tuple[int, ...], ...]
    adjacency: tuple[tuple[int, ...], ...]
    labels: tuple[str, ...]
    layer_of: np.ndarray = field(repr=False)

    @classmethod
    def from_labels(cls, layers: Sequence[Sequence], edges: Iterable[Sequence]) -> "LayeredGraph":
        """Build a graph from labelled layers and ``(src, dst)`` label pairs.

        Ids are assigned layer by layer in the given order. Unknown labels in
        edges raise ``InvalidGraphError``; every other defect is left for
        :func:`validate` to report.
        """
        labels: list[str] = []
        id_layers = []
        index: dict[str, int] = {}
        for layer in layers:
            ids = []
            for lab in layer:
                lab = str(lab)
                if lab not in index:
                    index[lab] = len(labels)
                    labels.append(lab)
                ids.append(index[lab])
            id_layers.append(tuple(ids))
        adj: list[set[int]] = [set() for _ in labels]
        for src, dst in edges:
            try:
                adj[index[str(src)]].add(index[str(dst)])
            except KeyError as exc:
                raise InvalidGraphError(f"edge references unknown vertex {exc.args[0]!r}") from None
        return cls.from_ids(id_layers, [sorted(a) for a in adj], labels)

    @classmethod
    def from_ids(cls, layers, adjacency, labels=None) -> "LayeredGraph":
        n = len(adjacency)
        layer_of = np.full(n, -1, dtype=np.int64)
        for l, layer in enumerate(layers):
            for v in layer:
                if layer_of[v] < 0:
                    layer_of[v] = l
        if labels is None:
            labels = [str(v) for v in range(n)]
        layer_of.setflags(write=False)
        return cls(
            layers=tuple(tuple(int(v) for v in layer) for layer in layers),
            adjacency=tuple(tuple(sorted(int(u) for u in a)) for a in adjacency),
            labels=tuple(labels),
            layer_of=layer_of,
        )

    @property
    def n_vertices(self) -> int:
        return len(self.adjacency)

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def degrees(self) -> np.ndarray:
        return np.array([len(a) for a in self.adjacency], dtype=np.int64)

    @property
    def n_edges(self) -> int:
        return sum(len(a) for a in self.adjacency)

    @property
    def root(self) -> int:
        return self.layers[0][0]

    def edges(self) -> list[tuple[int, int]]:
        return [(v, u) for v, a in enumerate(self.adjacency) for u in a]

    def edge_index(self, src: int, dst: int) -> int:
        """Position of ``dst`` in the canonical edge order of ``src``."""
        try:
            return self.adjacency[src].index(dst)
        except ValueError:
            raise KeyError((src, dst)) from None

    def vertex(self, label) -> int:
        try:
            return self.labels.index(str(label))
        except ValueError:
            raise KeyError(label) from None

    def in_degrees(self) -> np.ndarray:
        deg = np.zeros(self.n_vertices, dtype=np.int64)
        for a in self.adjacency:
            for u in a:
                deg[u] += 1
        return deg

    def to_dict(self) -> dict:
        return {
            "format_version": GRAPH_FORMAT_VERSION,
            "layers": [[self.labels[v] for v in layer] for layer in self.layers],
            "edges": [[self.labels[v], self.labels[u]] for v, u in self.edges()],
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def check(self) -> "LayeredGraph":
        report = validate(self)
        if not report.ok:
            raise InvalidGraphError("; ".join(report.violations))
        return self


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate(g: LayeredGraph) -> ValidationReport:
    """Check the layered-graph conditions and report every violation found."""
    out: list[str] = []
    if g.n_layers < 2:
        out.append(f"too-few-layers: {g.n_layers} < 2")
    for l, layer in enumerate(g.layers):
        if not layer:
            out.append(f"empty-layer: layer {l + 1}")
    if g.layers and len(g.layers[0]) != 1:
        out.append(f"first-layer-not-singleton: {len(g.layers[0])} vertices")
    seen: dict[int, int] = {}
    for l, layer in enumerate(g.layers):
        for v in layer:
            if v in seen:
                out.append(f"duplicate-vertex: {g.labels[v]} in layers {seen[v] + 1} and {l + 1}")
            seen[v] = l
    orphan = [v for v in range(g.n_vertices) if v not in seen]
    for v in orphan:
        out.append(f"vertex-without-layer: {g.labels[v]}")
    for v, u in g.edges():
        lv, lu = seen.get(v), seen.get(u)
        if lv is None or lu is None or lu != lv + 1:
            out.append(f"cross-layer-edge: {g.labels[v]}->{g.labels[u]}")
    indeg = g.in_degrees()
    last = g.n_layers - 1
    for v in range(g.n_vertices):
        if seen.get(v, last) < last and not g.adjacency[v] and indeg[v] > 0:
            out.append(f"dead-end-vertex: {g.labels[v]} has in-degree {indeg[v]} and no out-edges")
    return ValidationReport(tuple(out))


def is_valid_path(g: LayeredGraph, seq: Sequence[int]) -> bool:
    if len(seq) != g.n_layers:
        return False
    for l, v in enumerate(seq):
        v = int(v)
        if not 0 <= v < g.n_vertices or g.layer_of[v] != l:
            return False
        if l + 1 < len(seq) and int(seq[l + 1]) not in g.adjacency[v]:
            return False
    return True


def count_paths(g: LayeredGraph) -> int:
    """Number of root-to-last-layer paths, by a forward layer sweep."""
    ways = [0] * g.n_vertices
    ways[g.root] = 1
    for layer in g.layers[:-1]:
        for v in layer:
            if ways[v]:
                for u in g.adjacency[v]:
                    ways[u] += ways[v]
    return sum(ways[v] for v in g.layers[-1])


def enumerate_paths(g: LayeredGraph, cap: int = 1_000_000) -> list[tuple[int, ...]]:
    """All paths in lexicographic vertex-id order.

    Raises ``PathCountExceeded`` once more than ``cap`` paths have been found.
    """
    L = g.n_layers
    out: list[tuple[int, ...]] = []
    stack = [(g.root,)]
    while stack:
        prefix = stack.pop()
        if len(prefix) == L:
            out.append(prefix)
            if len(out) > cap:
                raise PathCountExceeded(len(out), cap)
            continue
        # reversed so the smallest successor is expanded first
        for u in reversed(g.adjacency[prefix[-1]]):
            stack.append(prefix + (u,))
    return out


def fully_connected(widths: Sequence[int]) -> LayeredGraph:
    layers, start = [], 0
    for w in widths:
        layers.append(list(range(start, start + w)))
        start += w
    adjacency = [[] for _ in range(start)]
    for a, b in zip(layers[:-1], layers[1:]):
        for v in a:
            adjacency[v] = list(b)
    return LayeredGraph.from_ids(layers, adjacency)


def _repair(layers: list[list[int]], adjacency: list[set[int]]) -> bool:
    """Delete dead-end vertices to a fixpoint. False if a layer empties."""
    alive = set(v for layer in layers for v in layer)
    last = set(layers[-1])
    changed = True
    while changed:
        changed = False
        dead = [v for v in alive if v not in last and not adjacency[v]]
        if dead:
            changed = True
            for v in dead:
                alive.discard(v)
            for v in alive:
                adjacency[v].difference_update(dead)
    for layer in layers:
        layer[:] = [v for v in layer if v in alive]
    return all(layers)


def synth_pruned(widths: Sequence[int], prune_fraction: float = 0.5, seed: int = 0,
                 max_retries: int = 64) -> LayeredGraph:
    """Randomly prune a layerwise fully connected graph into a valid layered graph.

    ``floor(prune_fraction * |E|)`` edges are removed uniformly at random, then
    vertices left without out-edges (outside the last layer) are deleted until
    none remain. Attempts that empty a layer are redrawn from a derived seed.
    """
    widths = [int(w) for w in widths]
    if len(widths) < 2 or widths[0] != 1 or min(widths) < 1:
        raise ValueError("widths must have length >= 2, start with 1 and be positive")
    if not 0.0 <= prune_fraction < 1.0:
        raise ValueError("prune_fraction must lie in [0, 1)")
    base = fully_connected(widths)
    all_edges = base.edges()
    n_remove = int(np.floor(prune_fraction * len(all_edges)))
    for attempt in range(max_retries):
        rng = np.random.default_rng([seed, attempt])
        removed = set(rng.choice(len(all_edges), size=n_remove, replace=False).tolist())
        adjacency = [set() for _ in range(base.n_vertices)]
        for i, (v, u) in enumerate(all_edges):
            if i not in removed:
                adjacency[v].add(u)
        layers = [list(layer) for layer in base.layers]
        if not _repair(layers, adjacency):
            continue
        remap = {v: i for i, v in enumerate(v for layer in layers for v in layer)}
        g = LayeredGraph.from_ids(
            [[remap[v] for v in layer] for layer in layers],
            [sorted(remap[u] for u in adjacency[v]) for v in sorted(remap, key=remap.get)],
        )
        if validate(g).ok and count_paths(g) > 0:
            return g
    raise SynthesisFailed(f"no valid pruned graph after {max_retries} attempts (seed={seed})")


@dataclass(frozen=True, eq=False)
class Dataset:
    graph: LayeredGraph
    paths: tuple[tuple[int, ...], ...]
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.paths)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.paths, dtype=np.int64).reshape(len(self.paths), self.graph.n_layers)

    def split(self, val_fraction: float, seed: int = 0) -> tuple["Dataset", "Dataset"]:
        """Shuffle-split into train and validation parts."""
        n = len(self.paths)
        n_val = int(round(val_fraction * n))
        order = np.random.default_rng(seed).permutation(n)
        val = tuple(self.paths[i] for i in sorted(order[:n_val]))
        train = tuple(self.paths[i] for i in sorted(order[n_val:]))
        return (Dataset(self.graph, train, {**self.meta, "split": "train"}),
                Dataset(self.graph, val, {**self.meta, "split": "val"}))


def _multiplicities(rng: np.random.Generator, n: int, law: str, param: float, cap: int) -> np.ndarray:
    if law == "constant":
        return np.full(n, int(param), dtype=np.int64)
    if law == "zipf":
        return np.minimum(rng.zipf(param, size=n), cap)
    raise ValueError(f"unknown multiplicity law {law!r}")


def build_dataset(g: LayeredGraph, mode: str = "all", count: int | None = None,
                  multiplicity: str = "zipf", multiplicity_param: float = 1.1,
                  multiplicity_cap: int = 64, seed: int = 0,
                  cap: int = 1_000_000) -> Dataset:
    """Build a path dataset.

    ``mode="all"`` keeps every unique path once. ``mode="sampled"`` draws
    ``count`` unique paths without replacement and repeats each one a number
    of times drawn from the multiplicity law (``zipf`` with exponent
    ``multiplicity_param`` capped at ``multiplicity_cap``, or ``constant``).
    """
    paths = enumerate_paths(g, cap=cap)
    meta = {"mode": mode, "seed": seed, "unique_paths": len(paths)}
    if mode == "all":
        return Dataset(g, tuple(paths), meta)
    if mode != "sampled":
        raise ValueError(f"unknown dataset mode {mode!r}")
    if count is None or count > len(paths) or count < 0:
        raise CountTooLarge(f"cannot draw {count} unique paths from {len(paths)}")
    rng = np.random.default_rng(seed)
    chosen = np.sort(rng.choice(len(paths), size=count, replace=False))
    reps = _multiplicities(rng, count, multiplicity, multiplicity_param, multiplicity_cap)
    out = []
    for i, k in zip(chosen, reps):
        out.extend([paths[i]] * int(k))
    meta.update(count=count, multiplicity=multiplicity, multiplicity_param=multiplicity_param,
                multiplicity_cap=multiplicity_cap)
    return Dataset(g, tuple(out), meta)


def example_graph() -> LayeredGraph:
    """The ten-vertex, four-layer example graph (A..J) used throughout the tests."""
    return LayeredGraph.from_labels(
        [["A"], ["B", "C", "D"], ["E", "F", "G"], ["H", "I", "J"]],
        [("A", "B"), ("A", "C"), ("A", "D"), ("B", "E"), ("B", "F"), ("C", "E"), ("C", "G"),
         ("D", "F"), ("D", "G"), ("E", "H"), ("E", "I"), ("F", "I"), ("G", "H"), ("G", "J")],
    )


# -- files -------------------------------------------------------------------

def save_graph(g: LayeredGraph, path) -> None:
    FsPath(path).write_text(json.dumps(g.to_dict(), indent=1) + "\n")


def graph_from_dict(doc: dict) -> LayeredGraph:
    version = doc.get("format_version")
    if version != GRAPH_FORMAT_VERSION:
        raise ValueError(f"unsupported graph format_version {version!r}")
    return LayeredGraph.from_labels(doc["layers"], doc["edges"])


def load_graph(path) -> LayeredGraph:
    return graph_from_dict(json.loads(FsPath(path).read_text()))


def format_path(g: LayeredGraph, p: Sequence[int]) -> str:
    return ",".join(g.labels[int(v)] for v in p)


def write_paths(g: LayeredGraph, paths, path, meta: dict | None = None,
                footer: Sequence[str] = ()) -> None:
    lines = [f"# format_version={DATASET_FORMAT_VERSION}"]
    if meta:
        lines.append("# meta=" + json.dumps(meta, sort_keys=True))
    lines += [format_path(g, p) for p in paths]
    lines += [f"# {s}" for s in footer]
    FsPath(path).write_text("\n".join(lines) + "\n")


def read_paths(g: LayeredGraph, path) -> tuple[list[tuple[int, ...]], dict]:
    """Read a path-per-line file. Labels must exist in ``g``; validity is not checked."""
    index = {lab: i for i, lab in enumerate(g.labels)}
    paths, meta, version = [], {}, None
    for line in FsPath(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("format_version="):
                version = int(body.split("=", 1)[1])
            elif body.startswith("meta="):
                meta = json.loads(body.split("=", 1)[1])
            continue
        try:
            paths.append(tuple(index[lab] for lab in line.split(",")))
        except KeyError as exc:
            raise ValueError(f"unknown vertex label {exc.args[0]!r} in {path}") from None
    if version != DATASET_FORMAT_VERSION:
        raise ValueError(f"unsupported path-file format_version {version!r}")
    return paths, meta


def load_dataset(g: LayeredGraph, path) -> Dataset:
    paths, meta = read_paths(g, path)
    bad = [p for p in paths if not is_valid_path(g, p)]
    if bad:
        raise InvalidDataset(f"{len(bad)} invalid paths in {path}, first: {format_path(g, bad[0])}")
    return Dataset(g, tuple(paths), meta)
