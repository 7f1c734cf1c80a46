"""Biased-motif synthetic graphs, environment splits, and the dataset format.

The generator plants one of three label-determining motifs on one of three
base graphs.  A bias ``b`` couples motif and base: the label-matched base is
chosen with probability ``b`` and each other base with ``(1 - b) / 2``, so
``b = 1/3`` is the unbiased setting and ``b = 1`` makes the base a perfect
(but spurious) predictor of the label on that split.  Node features carry an
analogously biased one-hot class signal plus one noise channel.

Concrete shapes (label -> motif, matched base):

* 0 -> house (4-cycle with a roof apex on two adjacent corners), tree
* 1 -> cycle (6-cycle), ladder (2 x k)
* 2 -> crane (triangle body with two legs), wheel (hub plus rim)

The motif is fused to the base at a single shared node, so the planted
subgraph is connected and node-disjoint from the base except at that
attachment point; its edges are recorded per graph as ``motif_mask`` for
mask-recovery diagnostics.

Datasets serialize to UTF-8 JSON lines: one header record, then one graph
per line.  Floats are written with ``repr`` and therefore round-trip
bit-exactly.
"""

from __future__ import annotations

import concurrent.futures
import hashlib
import json
import os
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    EmptyEnvironmentError,
    FormatError,
    InputValidationError,
    ParameterRangeError,
    VersionMismatchError,
)

DATASET_FORMAT_VERSION = 1
NUM_CLASSES = 3
FEATURE_DIM = 4

MOTIF_KINDS = ("house", "cycle", "crane")
BASE_KINDS = ("tree", "ladder", "wheel")

# label -> (motif kind, label-matched base kind)
LABEL_MOTIF = {0: "house", 1: "cycle", 2: "crane"}
LABEL_BASE = {0: "tree", 1: "ladder", 2: "wheel"}


# ---------------------------------------------------------------------------
# Core record types
# ---------------------------------------------------------------------------


def _canonical_edges(edges: Iterable[Sequence[int]], num_nodes: int) -> tuple[tuple[int, int], ...]:
    out = []
    seen = set()
    for e in edges:
        u, v = int(e[0]), int(e[1])
        if u == v:
            raise InputValidationError(f"self-loop at node {u}")
        if not (0 <= u < num_nodes and 0 <= v < num_nodes):
            raise InputValidationError(f"edge ({u}, {v}) outside [0, {num_nodes})")
        key = (min(u, v), max(u, v))
        if key in seen:
            raise InputValidationError(f"duplicate edge {key}")
        seen.add(key)
        out.append(key)
    return tuple(sorted(out))


@dataclass(frozen=True)
class Graph:
    """One attributed, undirected, labeled graph."""

    num_nodes: int
    edges: tuple[tuple[int, int], ...]
    node_features: np.ndarray
    label: int
    env: str
    graph_id: str
    motif_mask: tuple[tuple[int, int], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "edges", _canonical_edges(self.edges, self.num_nodes))
        feats = np.asarray(self.node_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != self.num_nodes:
            raise InputValidationError(
                f"features must be ({self.num_nodes}, d), got {feats.shape}"
            )
        object.__setattr__(self, "node_features", feats)
        if self.motif_mask is not None:
            mask = _canonical_edges(self.motif_mask, self.num_nodes)
            edge_set = set(self.edges)
            for e in mask:
                if e not in edge_set:
                    raise InputValidationError(f"motif edge {e} not in the graph")
            object.__setattr__(self, "motif_mask", mask)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def feature_dim(self) -> int:
        return int(self.node_features.shape[1])


@dataclass(frozen=True)
class Dataset:
    """An ordered collection of graphs with shared class/feature geometry."""

    graphs: tuple[Graph, ...]
    num_classes: int
    feature_dim: int
    environments: tuple[str, ...]
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))
        object.__setattr__(self, "environments", tuple(self.environments))
        if not self.graphs:
            raise InputValidationError("dataset must contain at least one graph")
        envs = set(self.environments)
        for g in self.graphs:
            if not 0 <= g.label < self.num_classes:
                raise InputValidationError(f"label {g.label} outside 0..{self.num_classes - 1}")
            if g.env not in envs:
                raise InputValidationError(f"graph {g.graph_id} has unknown env {g.env!r}")
            if g.feature_dim != self.feature_dim:
                raise InputValidationError("inconsistent feature width inside a dataset")

    def __len__(self) -> int:
        return len(self.graphs)

    def by_env(self, env: str) -> tuple[Graph, ...]:
        out = tuple(g for g in self.graphs if g.env == env)
        if not out:
            raise EmptyEnvironmentError(f"environment {env!r} is empty")
        return out

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)

    def mean_nodes(self) -> float:
        return float(np.mean([g.num_nodes for g in self.graphs]))

    def mean_edges(self) -> float:
        return float(np.mean([g.num_edges for g in self.graphs]))


@dataclass(frozen=True)
class MotifSpec:
    """Generation parameters for one biased-motif pool."""

    bias: float
    feature_bias: float
    base_size_range: tuple[int, int] = (6, 10)

    def __post_init__(self):
        for name, val in (("bias", self.bias), ("feature_bias", self.feature_bias)):
            if not (1.0 / 3.0 - 1e-12 <= val <= 1.0):
                raise ParameterRangeError(f"{name} must lie in [1/3, 1], got {val}")
        lo, hi = self.base_size_range
        if not (4 <= lo <= hi):
            raise ParameterRangeError(f"base_size_range must satisfy 4 <= min <= max, got {self.base_size_range}")


# ---------------------------------------------------------------------------
# Shape constructors (edges local to the shape, nodes 0..n-1)
# ---------------------------------------------------------------------------


def motif_edges(kind: str) -> tuple[list[tuple[int, int]], int]:
    if kind == "house":
        return [(0, 1), (1, 2), (2, 3), (3, 0), (2, 4), (3, 4)], 5
    if kind == "cycle":
        return [(i, (i + 1) % 6) for i in range(6)], 6
    if kind == "crane":
        return [(0, 1), (1, 2), (2, 0), (0, 3), (1, 4)], 5
    raise InputValidationError(f"unknown motif kind {kind!r}")


def base_edges(kind: str, size: int, rng: np.random.Generator) -> tuple[list[tuple[int, int]], int]:
    if kind == "tree":
        # Random binary tree: each new node attaches to a uniformly chosen
        # node that still has fewer than two children.
        children = np.zeros(size, dtype=np.int64)
        edges = []
        for v in range(1, size):
            open_slots = np.flatnonzero(children[:v] < 2)
            parent = int(open_slots[rng.integers(open_slots.size)])
            children[parent] += 1
            edges.append((parent, v))
        return edges, size
    if kind == "ladder":
        k = max(2, size // 2)
        edges = [(2 * i, 2 * i + 1) for i in range(k)]
        edges += [(2 * i, 2 * i + 2) for i in range(k - 1)]
        edges += [(2 * i + 1, 2 * i + 3) for i in range(k - 1)]
        return edges, 2 * k
    if kind == "wheel":
        rim = size - 1
        edges = [(0, i) for i in range(1, size)]
        edges += [(i, i % rim + 1) for i in range(1, size)]
        return edges, size
    raise InputValidationError(f"unknown base kind {kind!r}")


def _biased_choice(rng: np.random.Generator, matched: int, bias: float, k: int = 3) -> int:
    """``matched`` with probability ``bias``; each other index with (1-b)/(k-1)."""
    if rng.random() < bias:
        return matched
    others = [i for i in range(k) if i != matched]
    return others[int(rng.integers(k - 1))]


def _generate_one(index: int, seed: int, spec: MotifSpec, env: str) -> Graph:
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, index))))
    label = int(rng.integers(NUM_CLASSES))
    base_kind = BASE_KINDS[_biased_choice(rng, BASE_KINDS.index(LABEL_BASE[label]), spec.bias)]
    signal = _biased_choice(rng, label, spec.feature_bias)

    lo, hi = spec.base_size_range
    b_edges, b_n = base_edges(base_kind, int(rng.integers(lo, hi + 1)), rng)
    m_edges, m_n = motif_edges(LABEL_MOTIF[label])

    attach_base = int(rng.integers(b_n))
    attach_motif = int(rng.integers(m_n))
    # Motif nodes map to fresh indices after the base, except the fused one.
    mapping = {}
    nxt = b_n
    for v in range(m_n):
        if v == attach_motif:
            mapping[v] = attach_base
        else:
            mapping[v] = nxt
            nxt += 1
    num_nodes = b_n + m_n - 1
    mask = [(mapping[u], mapping[v]) for u, v in m_edges]
    edges = list(b_edges) + mask

    feats = np.zeros((num_nodes, FEATURE_DIM))
    feats[:, signal] = 1.0
    feats[:, 3] = rng.standard_normal(num_nodes)
    return Graph(
        num_nodes=num_nodes,
        edges=edges,
        node_features=feats,
        label=label,
        env=env,
        graph_id=f"g{index:06d}",
        motif_mask=mask,
    )


def _worker_count() -> int:
    raw = os.environ.get("SNIGL_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def generate_spurious_motif(
    n: int,
    bias: float,
    feature_bias: float | None = None,
    seed: int = 0,
    *,
    base_size_range: tuple[int, int] = (6, 10),
    env: str = "train",
) -> Dataset:
    """Generate ``n`` biased-motif graphs.

    Per-graph randomness comes from a counter-based stream keyed by
    ``(seed, index)``, so output is independent of worker count and
    byte-identical across runs with the same arguments.
    ``feature_bias`` defaults to ``bias`` (the mixed structure+feature
    shift).
    """
    if n < NUM_CLASSES * 10:
        raise ParameterRangeError(f"n must be >= {NUM_CLASSES * 10}, got {n}")
    spec = MotifSpec(
        bias=bias,
        feature_bias=bias if feature_bias is None else feature_bias,
        base_size_range=tuple(base_size_range),
    )
    workers = _worker_count()
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
            graphs = list(pool.map(lambda i: _generate_one(i, seed, spec, env), range(n)))
    else:
        graphs = [_generate_one(i, seed, spec, env) for i in range(n)]
    digest = hashlib.sha256(
        json.dumps(
            {
                "generator": "spurious-motif",
                "n": n,
                "bias": spec.bias,
                "feature_bias": spec.feature_bias,
                "base_size_range": list(spec.base_size_range),
                "seed": seed,
            },
            sort_keys=True,
        ).encode()
    ).hexdigest()
    return Dataset(
        graphs=tuple(graphs),
        num_classes=NUM_CLASSES,
        feature_dim=FEATURE_DIM,
        environments=(env,),
        provenance=digest,
    )


# ---------------------------------------------------------------------------
# Structural diagnostics
# ---------------------------------------------------------------------------


def classify_base_kind(graph: Graph) -> str:
    """Identify the base shape of a generated graph from its structure.

    Requires ``motif_mask``; the base is what remains after removing motif
    edges and motif-only nodes.  Trees are acyclic, wheels have a hub
    adjacent to every other base node, and anything else is a ladder.
    """
    if graph.motif_mask is None:
        raise InputValidationError(f"graph {graph.graph_id} lacks a motif mask")
    mask = set(graph.motif_mask)
    rest = [e for e in graph.edges if e not in mask]
    nodes = sorted({u for e in rest for u in e})
    if not rest:
        raise InputValidationError("no base edges remain after removing the motif")
    n, m = len(nodes), len(rest)
    degree = {v: 0 for v in nodes}
    for u, v in rest:
        degree[u] += 1
        degree[v] += 1
    if m == n - 1:
        return "tree"
    if max(degree.values()) == n - 1 and n >= 4:
        return "wheel"
    return "ladder"


def motif_base_pairing(dataset: Dataset) -> np.ndarray:
    """Row-normalized label x base-kind frequency matrix."""
    counts = np.zeros((NUM_CLASSES, len(BASE_KINDS)))
    for g in dataset.graphs:
        counts[g.label, BASE_KINDS.index(classify_base_kind(g))] += 1
    rows = counts.sum(axis=1, keepdims=True)
    rows[rows == 0] = 1.0
    return counts / rows


# ---------------------------------------------------------------------------
# Environment splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SplitScheme:
    """How to carve a pool into training environments plus a held-out test.

    * ``bias-levels``: subsample disjoint environments whose motif/base
      pairing rates hit each requested bias; the test split is unbiased
      (pairing 1/3).  Leftover pool graphs are dropped.
    * ``base-kind``: hold one base kind out as the test split; each
      remaining base kind becomes one training environment.
    * ``size-threshold``: graphs at or above the threshold (default: median
      node count) form the test split; the rest split at their own median
      into two size-band environments.
    """

    kind: str
    levels: tuple[float, ...] = ()
    holdout: str = "wheel"
    threshold: int | None = None

    def __post_init__(self):
        if self.kind not in ("bias-levels", "base-kind", "size-threshold"):
            raise ParameterRangeError(f"unknown split scheme {self.kind!r}")
        object.__setattr__(self, "levels", tuple(self.levels))
        if self.kind == "bias-levels":
            if len(self.levels) < 2:
                raise ParameterRangeError("bias-levels needs >= 2 biases")
            for b in self.levels:
                if not (1.0 / 3.0 <= b <= 1.0):
                    raise ParameterRangeError(f"bias {b} outside [1/3, 1]")
        if self.kind == "base-kind" and self.holdout not in BASE_KINDS:
            raise ParameterRangeError(f"unknown base kind {self.holdout!r}")


def _retag(graphs: Sequence[Graph], env: str) -> list[Graph]:
    return [replace(g, env=env) for g in graphs]


def _split_bias_levels(dataset: Dataset, levels: Sequence[float]):
    by_cell: dict[tuple[int, int], list[Graph]] = {}
    for g in dataset.graphs:
        cell = (g.label, BASE_KINDS.index(classify_base_kind(g)))
        by_cell.setdefault(cell, []).append(g)
    pairings = [float(b) for b in levels] + [1.0 / 3.0]  # test split last
    # Per-unit cell demand of each split: size q each, a third per label,
    # pairing-weighted across bases.
    demand = np.zeros((NUM_CLASSES, len(BASE_KINDS)))
    for b in pairings:
        for y in range(NUM_CLASSES):
            for k in range(len(BASE_KINDS)):
                p = b if BASE_KINDS[k] == LABEL_BASE[y] else (1.0 - b) / 2.0
                demand[y, k] += p / NUM_CLASSES
    avail = np.zeros_like(demand)
    for (y, k), graphs in by_cell.items():
        avail[y, k] = len(graphs)
    with np.errstate(divide="ignore"):
        q = int(np.floor(np.min(np.where(demand > 0, avail / demand, np.inf))))
    if q <= 0:
        raise EmptyEnvironmentError("pool too small to realize the requested bias levels")
    cursor = {cell: 0 for cell in by_cell}
    splits: list[list[Graph]] = []
    for b in pairings:
        take: list[Graph] = []
        for y in range(NUM_CLASSES):
            for k in range(len(BASE_KINDS)):
                p = b if BASE_KINDS[k] == LABEL_BASE[y] else (1.0 - b) / 2.0
                want = int(np.floor(q / NUM_CLASSES * p))
                pool = by_cell.get((y, k), [])
                start = cursor.get((y, k), 0)
                got = pool[start : start + want]
                if len(got) < want:
                    raise EmptyEnvironmentError(
                        f"cell (label={y}, base={BASE_KINDS[k]}) exhausted"
                    )
                cursor[(y, k)] = start + want
                take.extend(got)
        splits.append(take)
    env_names = [f"bias={b:g}" for b in levels]
    train_graphs: list[Graph] = []
    for name, graphs in zip(env_names, splits[:-1]):
        if not graphs:
            raise EmptyEnvironmentError(f"environment {name!r} came out empty")
        train_graphs.extend(_retag(graphs, name))
    test_graphs = _retag(splits[-1], "test")
    return train_graphs, tuple(env_names), test_graphs


def _split_base_kind(dataset: Dataset, holdout: str):
    groups: dict[str, list[Graph]] = {k: [] for k in BASE_KINDS}
    for g in dataset.graphs:
        groups[classify_base_kind(g)].append(g)
    test_graphs = _retag(groups[holdout], "test")
    train_graphs: list[Graph] = []
    env_names = []
    for kind in BASE_KINDS:
        if kind == holdout:
            continue
        if not groups[kind]:
            raise EmptyEnvironmentError(f"no graphs with base kind {kind!r}")
        env_names.append(f"base={kind}")
        train_graphs.extend(_retag(groups[kind], f"base={kind}"))
    if not test_graphs:
        raise EmptyEnvironmentError(f"no graphs with held-out base kind {holdout!r}")
    return train_graphs, tuple(env_names), test_graphs


def _split_size_threshold(dataset: Dataset, threshold: int | None):
    sizes = np.array([g.num_nodes for g in dataset.graphs])
    t = int(np.median(sizes)) if threshold is None else int(threshold)
    train_pool = [g for g in dataset.graphs if g.num_nodes < t]
    test_graphs = _retag([g for g in dataset.graphs if g.num_nodes >= t], "test")
    if not train_pool or not test_graphs:
        raise EmptyEnvironmentError(f"size threshold {t} leaves an empty side")
    inner = int(np.median([g.num_nodes for g in train_pool]))
    small = [g for g in train_pool if g.num_nodes < inner]
    mid = [g for g in train_pool if g.num_nodes >= inner]
    if not small or not mid:
        raise EmptyEnvironmentError("train sizes too uniform for two size bands")
    env_names = (f"size<{inner}", f"size>={inner}")
    train_graphs = _retag(small, env_names[0]) + _retag(mid, env_names[1])
    return train_graphs, env_names, test_graphs


def split_environments(dataset: Dataset, scheme: SplitScheme) -> tuple[Dataset, Dataset]:
    """Partition a pool into env-tagged training data plus a test split."""
    if scheme.kind == "bias-levels":
        train_graphs, env_names, test_graphs = _split_bias_levels(dataset, scheme.levels)
    elif scheme.kind == "base-kind":
        train_graphs, env_names, test_graphs = _split_base_kind(dataset, scheme.holdout)
    else:
        train_graphs, env_names, test_graphs = _split_size_threshold(dataset, scheme.threshold)
    train = Dataset(
        graphs=tuple(train_graphs),
        num_classes=dataset.num_classes,
        feature_dim=dataset.feature_dim,
        environments=env_names,
        provenance=dataset.provenance,
    )
    test = Dataset(
        graphs=tuple(test_graphs),
        num_classes=dataset.num_classes,
        feature_dim=dataset.feature_dim,
        environments=("test",),
        provenance=dataset.provenance,
    )
    return train, test


# ---------------------------------------------------------------------------
# Line-delimited on-disk format
# ---------------------------------------------------------------------------


def _graph_record(graph: Graph) -> dict:
    rec = {
        "version": DATASET_FORMAT_VERSION,
        "graph_id": graph.graph_id,
        "num_nodes": graph.num_nodes,
        "edges": [[u, v] for u, v in graph.edges],
        "node_features": [[float(x) for x in row] for row in graph.node_features],
        "label": graph.label,
        "env": graph.env,
    }
    if graph.motif_mask is not None:
        rec["motif_mask"] = [[u, v] for u, v in graph.motif_mask]
    return rec


def save_dataset(dataset: Dataset, path) -> None:
    header = {
        "version": DATASET_FORMAT_VERSION,
        "num_classes": dataset.num_classes,
        "feature_dim": dataset.feature_dim,
        "environments": list(dataset.environments),
        "provenance": dataset.provenance,
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, separators=(",", ":")) + "\n")
        for g in dataset.graphs:
            fh.write(json.dumps(_graph_record(g), separators=(",", ":")) + "\n")


def load_dataset(path) -> Dataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError("empty dataset file", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"unreadable header: {exc}", 1) from exc
    version = header.get("version")
    if version != DATASET_FORMAT_VERSION:
        raise VersionMismatchError(
            f"dataset format version {version!r}, reader supports {DATASET_FORMAT_VERSION}", 1
        )
    graphs: list[Graph] = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            graphs.append(
                Graph(
                    num_nodes=rec["num_nodes"],
                    edges=[tuple(e) for e in rec["edges"]],
                    node_features=np.array(rec["node_features"], dtype=np.float64),
                    label=rec["label"],
                    env=rec["env"],
                    graph_id=rec["graph_id"],
                    motif_mask=(
                        tuple(tuple(e) for e in rec["motif_mask"])
                        if "motif_mask" in rec
                        else None
                    ),
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, InputValidationError) as exc:
            raise FormatError(f"malformed graph record: {exc}", lineno) from exc
    if not graphs:
        raise FormatError("dataset has a header but no graphs", 2)
    return Dataset(
        graphs=tuple(graphs),
        num_classes=header["num_classes"],
        feature_dim=header["feature_dim"],
        environments=tuple(header["environments"]),
        provenance=header.get("provenance", ""),
    )


def datasets_equal(a: Dataset, b: Dataset) -> bool:
    """Field-for-field equality, including float bit patterns."""
    if (
        a.num_classes != b.num_classes
        or a.feature_dim != b.feature_dim
        or a.environments != b.environments
        or a.provenance != b.provenance
        or len(a) != len(b)
    ):
        return False
    for ga, gb in zip(a.graphs, b.graphs):
        if (
            ga.num_nodes != gb.num_nodes
            or ga.edges != gb.edges
            or ga.label != gb.label
            or ga.env != gb.env
            or ga.graph_id != gb.graph_id
            or ga.motif_mask != gb.motif_mask
            or ga.node_features.shape != gb.node_features.shape
            or not np.array_equal(
                ga.node_features.view(np.uint64), gb.node_features.view(np.uint64)
            )
        ):
            return False
    return True
