"""Differentiable core: encoders, edge masks, relaxed sampling, classifiers.

Architecture, end to end:

* ``encode``: two rounds of sum-aggregation message passing in which every
  message is scaled by its edge weight, each round followed by a two-layer
  perceptron (tanh).  With all-zero weights a node sees only itself.
* ``edge_probabilities``: per-edge Bernoulli parameters ``sigma(<Z_u, Z_v>)``
  restricted to the edges of the input graph (a subgraph cannot invent
  edges).
* ``sample_subgraph``: per-edge binary-concrete relaxation at temperature
  ``tau``; the hard variant emits exact 0/1 with straight-through gradients
  (backward treats the sample as the relaxed value).
* ``classify``: mean readout (max available via config) followed by a
  three-layer perceptron and softmax; one shared invariant head plus one
  variant head per training environment.
* ``estimate_p_c_given_g``: the isomorphism-counting surrogate, a mean of
  sigmoid inner products between pooled representations of fresh mask
  samples and the query subgraph.

Everything runs on the reverse-mode tape in :mod:`snigl.autodiff`; public
helpers accept plain :class:`snigl.data.Graph` objects and return numpy
arrays.  Graphs are processed in packed batches (block-diagonal layout).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .data import Dataset, Graph
from .errors import (
    DimensionMismatchError,
    EmptyEnvironmentError,
    FormatError,
    InputValidationError,
    UnknownEnvironmentError,
    VersionMismatchError,
)

CHECKPOINT_MAGIC = b"SNIGLCKPT1\n"

READOUTS = ("mean", "max")
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class ModelConfig:
    feature_dim: int
    num_classes: int
    hidden_dim: int = 32
    readout: str = "mean"
    activation: str = "tanh"

    def __post_init__(self):
        if self.readout not in READOUTS:
            raise InputValidationError(f"readout must be one of {READOUTS}")
        if self.activation not in ACTIVATIONS:
            raise InputValidationError(f"activation must be one of {ACTIVATIONS}")
        if min(self.feature_dim, self.num_classes, self.hidden_dim) < 1:
            raise InputValidationError("model dimensions must be positive")


@dataclass
class ModelParams:
    """All learnable arrays, keyed by path (e.g. ``enc_c/r1/W1``).

    ``enc_c``/``enc_s`` are the invariant/variant encoders, ``head_c`` the
    shared invariant classifier, and ``head_s/<env>`` one variant classifier
    per training environment.
    """

    values: dict[str, np.ndarray]
    config: ModelConfig
    envs: tuple[str, ...]

    def copy(self) -> "ModelParams":
        return ModelParams(
            values={k: v.copy() for k, v in self.values.items()},
            config=self.config,
            envs=self.envs,
        )

    def head_env_keys(self, env: str) -> list[str]:
        if env not in self.envs:
            raise UnknownEnvironmentError(f"no variant head for environment {env!r}")
        return [k for k in self.values if k.startswith(f"head_s/{env}/")]


def _init_mlp2(rng, prefix, d_in, d_out, values):
    values[f"{prefix}/W1"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_out))
    values[f"{prefix}/b1"] = np.zeros(d_out)
    values[f"{prefix}/W2"] = rng.normal(0.0, 1.0 / np.sqrt(d_out), size=(d_out, d_out))
    values[f"{prefix}/b2"] = np.zeros(d_out)


def _init_mlp3(rng, prefix, d_in, d_hidden, d_out, values):
    values[f"{prefix}/W1"] = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_hidden))
    values[f"{prefix}/b1"] = np.zeros(d_hidden)
    values[f"{prefix}/W2"] = rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_hidden, d_hidden))
    values[f"{prefix}/b2"] = np.zeros(d_hidden)
    values[f"{prefix}/W3"] = rng.normal(0.0, 1.0 / np.sqrt(d_hidden), size=(d_hidden, d_out))
    values[f"{prefix}/b3"] = np.zeros(d_out)


def init_params(config: ModelConfig, envs: Sequence[str], seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    for enc in ("enc_c", "enc_s"):
        _init_mlp2(rng, f"{enc}/r1", config.feature_dim, config.hidden_dim, values)
        _init_mlp2(rng, f"{enc}/r2", config.hidden_dim, config.hidden_dim, values)
    _init_mlp3(rng, "head_c", config.hidden_dim, config.hidden_dim, config.num_classes, values)
    for env in envs:
        _init_mlp3(
            rng, f"head_s/{env}", config.hidden_dim, config.hidden_dim, config.num_classes, values
        )
    return ModelParams(values=values, config=config, envs=tuple(envs))


def init_variant_head(config: ModelConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """A fresh, unprefixed three-layer head (used for test-domain fitting)."""
    rng = np.random.default_rng(seed)
    values: dict[str, np.ndarray] = {}
    _init_mlp3(rng, "head", config.hidden_dim, config.hidden_dim, config.num_classes, values)
    return values


# ---------------------------------------------------------------------------
# Packed batches
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PackedBatch:
    """A block-diagonal packing of several graphs.

    Undirected edges are stored once (``edge_u``/``edge_v``) and expanded to
    both directions for message passing (``edge_src``/``edge_dst``), with
    ``edge_id`` mapping each directed entry back to its undirected weight.
    """

    features: np.ndarray  # (N, d)
    edge_u: np.ndarray  # (E,)
    edge_v: np.ndarray  # (E,)
    edge_src: np.ndarray  # (2E,)
    edge_dst: np.ndarray  # (2E,)
    edge_id: np.ndarray  # (2E,)
    node_graph: np.ndarray  # (N,)
    edge_graph: np.ndarray  # (E,)
    labels: np.ndarray  # (B,)
    num_graphs: int
    num_nodes: int
    num_edges: int
    graphs: tuple[Graph, ...] = field(repr=False)


def pack(graphs: Sequence[Graph]) -> PackedBatch:
    if not graphs:
        raise InputValidationError("cannot pack an empty batch")
    feats, eu, ev, ng, eg = [], [], [], [], []
    offset = 0
    for gi, g in enumerate(graphs):
        feats.append(g.node_features)
        for u, v in g.edges:
            eu.append(u + offset)
            ev.append(v + offset)
            eg.append(gi)
        ng.extend([gi] * g.num_nodes)
        offset += g.num_nodes
    features = np.concatenate(feats, axis=0) if feats else np.zeros((0, 0))
    eu = np.array(eu, dtype=np.int64)
    ev = np.array(ev, dtype=np.int64)
    edge_src = np.concatenate([eu, ev])
    edge_dst = np.concatenate([ev, eu])
    edge_id = np.concatenate([np.arange(eu.size), np.arange(eu.size)])
    return PackedBatch(
        features=features,
        edge_u=eu,
        edge_v=ev,
        edge_src=edge_src,
        edge_dst=edge_dst,
        edge_id=edge_id,
        node_graph=np.array(ng, dtype=np.int64),
        edge_graph=np.array(eg, dtype=np.int64),
        labels=np.array([g.label for g in graphs], dtype=np.int64),
        num_graphs=len(graphs),
        num_nodes=offset,
        num_edges=eu.size,
        graphs=tuple(graphs),
    )


# ---------------------------------------------------------------------------
# Tape-level forward pieces
# ---------------------------------------------------------------------------


def _act(config: ModelConfig, x: Var) -> Var:
    return ad.tanh(x) if config.activation == "tanh" else ad.relu(x)


def _mlp2(nodes: Mapping[str, Var], prefix: str, x: Var, config: ModelConfig) -> Var:
    h = _act(config, x @ nodes[f"{prefix}/W1"] + nodes[f"{prefix}/b1"])
    return _act(config, h @ nodes[f"{prefix}/W2"] + nodes[f"{prefix}/b2"])


def _mlp3_logits(nodes: Mapping[str, Var], prefix: str, x: Var, config: ModelConfig) -> Var:
    h = _act(config, x @ nodes[f"{prefix}/W1"] + nodes[f"{prefix}/b1"])
    h = _act(config, h @ nodes[f"{prefix}/W2"] + nodes[f"{prefix}/b2"])
    return h @ nodes[f"{prefix}/W3"] + nodes[f"{prefix}/b3"]


def encode_tape(
    nodes: Mapping[str, Var],
    encoder: str,
    packed: PackedBatch,
    edge_weights: Var | None,
    config: ModelConfig,
) -> Var:
    """Node embeddings (N, hidden) for one packed batch.

    ``edge_weights`` is a length-``num_edges`` tape node over undirected
    edges (``None`` means weight one everywhere); a zero weight removes the
    edge from message passing exactly.
    """
    if edge_weights is not None and edge_weights.shape != (packed.num_edges,):
        raise DimensionMismatchError(
            f"edge weights shape {edge_weights.shape} != ({packed.num_edges},)"
        )
    h = Var(packed.features)
    for round_name in ("r1", "r2"):
        msg = ad.take_rows(h, packed.edge_src)
        if edge_weights is not None:
            w_dir = ad.take_rows(ad.reshape(edge_weights, (packed.num_edges, 1)), packed.edge_id)
            msg = msg * w_dir
        agg = ad.segment_sum(msg, packed.edge_dst, packed.num_nodes)
        h = _mlp2(nodes, f"{encoder}/{round_name}", h + agg, config)
    return h


def readout_tape(h: Var, packed: PackedBatch, config: ModelConfig) -> Var:
    if config.readout == "mean":
        return ad.segment_mean(h, packed.node_graph, packed.num_graphs)
    return ad.segment_max(h, packed.node_graph, packed.num_graphs)


def edge_logits_tape(z: Var, packed: PackedBatch) -> Var:
    """Per-undirected-edge inner products ``<Z_u, Z_v>`` (symmetric)."""
    zu = ad.take_rows(z, packed.edge_u)
    zv = ad.take_rows(z, packed.edge_v)
    return ad.sum_(zu * zv, axis=1)


def sample_weights_tape(
    edge_logits: Var,
    noise: np.ndarray,
    tau: float,
    hard: bool = False,
) -> Var:
    """Binary-concrete edge weights from mask logits and fixed uniform noise.

    ``w = sigmoid((logit(p) + logit(u)) / tau)``; a hard sample thresholds
    the pre-activation at zero and straight-through couples its gradient to
    the relaxed value.
    """
    if tau <= 0:
        raise InputValidationError(f"temperature must be positive, got {tau}")
    u = np.asarray(noise, dtype=np.float64)
    if u.shape != edge_logits.shape:
        raise DimensionMismatchError(f"noise shape {u.shape} != logits {edge_logits.shape}")
    gumbel = np.log(u) - np.log1p(-u)
    relaxed = ad.sigmoid((edge_logits + Var(gumbel)) * (1.0 / tau))
    if not hard:
        return relaxed
    hard_values = (edge_logits.value + gumbel > 0).astype(np.float64)
    return relaxed + Var(hard_values - relaxed.value)


def classify_tape(
    nodes: Mapping[str, Var],
    packed: PackedBatch,
    embeddings: Var,
    config: ModelConfig,
    head: str = "head_c",
) -> Var:
    """Log-probabilities (B, K) from node embeddings via readout and a head."""
    pooled = readout_tape(embeddings, packed, config)
    return ad.log_softmax(_mlp3_logits(nodes, head, pooled, config))


def params_to_nodes(params: ModelParams) -> dict[str, Var]:
    return {k: Var(v) for k, v in params.values.items()}


# ---------------------------------------------------------------------------
# Public graph-level operations
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EdgeProbabilityMask:
    """Per-edge Bernoulli parameters over the owner's edge set."""

    probs: np.ndarray
    edges: tuple[tuple[int, int], ...]
    owner: str
    kind: str  # "invariant" | "variant"

    def as_dict(self) -> dict[tuple[int, int], float]:
        return {e: float(p) for e, p in zip(self.edges, self.probs)}


@dataclass(frozen=True)
class SubgraphSample:
    """Edge weights drawn from a mask: relaxed in [0,1] or hard {0,1}."""

    weights: np.ndarray
    edges: tuple[tuple[int, int], ...]
    owner: str
    temperature: float
    seed: int
    hard: bool


@dataclass(frozen=True)
class GraphRepresentation:
    vector: np.ndarray
    pooled_from: str


def _encoder_name(kind: str) -> str:
    if kind == "invariant":
        return "enc_c"
    if kind == "variant":
        return "enc_s"
    raise InputValidationError(f"kind must be 'invariant' or 'variant', got {kind!r}")


def _weights_var(graph: Graph, weights) -> Var | None:
    if weights is None:
        return None
    if isinstance(weights, SubgraphSample):
        arr = weights.weights
    else:
        arr = np.asarray(weights, dtype=np.float64)
    if arr.shape != (len(graph.edges),):
        raise DimensionMismatchError(
            f"weights shape {arr.shape} != ({len(graph.edges)},) for {graph.graph_id}"
        )
    return Var(arr)


def encode(graph: Graph, weights, params: ModelParams, kind: str = "invariant") -> np.ndarray:
    """Node embeddings (num_nodes, hidden) under the given edge weights.

    ``weights`` may be ``None`` (all ones), a plain array over the graph's
    canonical edge order, or a :class:`SubgraphSample`.
    """
    if graph.feature_dim != params.config.feature_dim:
        raise DimensionMismatchError(
            f"graph features {graph.feature_dim}-d, model expects {params.config.feature_dim}-d"
        )
    packed = pack([graph])
    nodes = params_to_nodes(params)
    return encode_tape(nodes, _encoder_name(kind), packed, _weights_var(graph, weights), params.config).value


def edge_probabilities(z: np.ndarray, graph: Graph, kind: str = "invariant") -> EdgeProbabilityMask:
    """``sigma(<Z_u, Z_v>)`` per edge of the graph."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != graph.num_nodes:
        raise DimensionMismatchError(
            f"embeddings have {z.shape[0]} rows for {graph.num_nodes} nodes"
        )
    eu = np.array([u for u, _ in graph.edges], dtype=np.int64)
    ev = np.array([v for _, v in graph.edges], dtype=np.int64)
    inner = (z[eu] * z[ev]).sum(axis=1)
    e = np.exp(-np.abs(inner))
    probs = np.where(inner >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return EdgeProbabilityMask(probs=probs, edges=graph.edges, owner=graph.graph_id, kind=kind)


def edge_mask(graph: Graph, params: ModelParams, kind: str = "invariant") -> EdgeProbabilityMask:
    """Mask of a graph under the full-graph encoder pass (weights one)."""
    z = encode(graph, None, params, kind=kind)
    return edge_probabilities(z, graph, kind=kind)


def sample_subgraph(
    mask: EdgeProbabilityMask,
    tau: float,
    seed: int = 0,
    hard: bool = False,
) -> SubgraphSample:
    """Draw relaxed (or straight-through hard) edge weights from a mask."""
    if tau <= 0:
        raise InputValidationError(f"temperature must be positive, got {tau}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed,))))
    probs = np.clip(mask.probs, 1e-12, 1.0 - 1e-12)
    logits = np.log(probs) - np.log1p(-probs)
    u = rng.uniform(size=probs.shape)
    pre = logits + np.log(u) - np.log1p(-u)
    relaxed = 1.0 / (1.0 + np.exp(-pre / tau))
    weights = (pre > 0).astype(np.float64) if hard else relaxed
    return SubgraphSample(
        weights=weights,
        edges=mask.edges,
        owner=mask.owner,
        temperature=tau,
        seed=seed,
        hard=hard,
    )


def classify(
    graph: Graph,
    weights,
    params: ModelParams,
    env: str | None = None,
) -> np.ndarray:
    """Predictive simplex of the invariant head (``env=None``) or of the
    variant head for one training environment."""
    packed = pack([graph])
    nodes = params_to_nodes(params)
    head = "head_c"
    if env is not None:
        if env not in params.envs:
            raise UnknownEnvironmentError(f"unknown environment {env!r}")
        head = f"head_s/{env}"
    kind = "invariant" if env is None else "variant"
    h = encode_tape(nodes, _encoder_name(kind), packed, _weights_var(graph, weights), params.config)
    logp = classify_tape(nodes, packed, h, params.config, head=head)
    return np.exp(logp.value[0])


def pooled_representation(
    graph: Graph, weights, params: ModelParams, kind: str = "invariant"
) -> GraphRepresentation:
    packed = pack([graph])
    nodes = params_to_nodes(params)
    h = encode_tape(nodes, _encoder_name(kind), packed, _weights_var(graph, weights), params.config)
    pooled = readout_tape(h, packed, params.config)
    return GraphRepresentation(vector=pooled.value[0], pooled_from=graph.graph_id)


def estimate_p_c_given_g(
    graph: Graph,
    c: SubgraphSample,
    k: int,
    params: ModelParams,
    seed: int = 0,
) -> float:
    """Isomorphism-count surrogate for P(C=c | G).

    Draws ``k`` fresh samples from the graph's invariant mask, pools each
    through the invariant encoder, and averages sigmoid inner products with
    the pooled representation of ``c``.  Always strictly inside (0, 1).
    """
    if k < 1:
        raise InputValidationError(f"k must be >= 1, got {k}")
    mask = edge_mask(graph, params, kind="invariant")
    rep_c = pooled_representation(graph, c, params, kind="invariant").vector
    reps = []
    for i in range(k):
        sample = sample_subgraph(mask, tau=max(c.temperature, 1e-3), seed=seed * 100003 + i)
        reps.append(pooled_representation(graph, sample, params, kind="invariant").vector)
    return mean_sigmoid_similarity(np.stack(reps), rep_c)


def mean_sigmoid_similarity(reps: np.ndarray, rep_c: np.ndarray) -> float:
    """Average of ``sigmoid(<rep_i, rep_c>)`` over sample representations."""
    inner = np.asarray(reps) @ np.asarray(rep_c)
    e = np.exp(-np.abs(inner))
    sims = np.where(inner >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return float(sims.mean())


def empirical_label_dist(dataset: Dataset, env: str) -> np.ndarray:
    """Class frequencies within one environment."""
    graphs = dataset.by_env(env)
    counts = np.zeros(dataset.num_classes)
    for g in graphs:
        counts[g.label] += 1
    return counts / counts.sum()


def export_masks(graphs: Sequence[Graph], params: ModelParams, path, kind: str = "invariant") -> None:
    """Write per-graph edge lists with mask probabilities as JSON lines."""
    with open(path, "w", encoding="utf-8") as fh:
        for g in graphs:
            mask = edge_mask(g, params, kind=kind)
            rec = {
                "graph_id": g.graph_id,
                "kind": kind,
                "edges": [[int(u), int(v)] for u, v in mask.edges],
                "probs": [float(p) for p in mask.probs],
            }
            if g.motif_mask is not None:
                rec["motif_mask"] = [[int(u), int(v)] for u, v in g.motif_mask]
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


# ---------------------------------------------------------------------------
# Checkpoints: versioned binary container keyed by parameter path
# ---------------------------------------------------------------------------


def save_checkpoint(params: ModelParams, path) -> None:
    meta = {
        "version": 1,
        "config": {
            "feature_dim": params.config.feature_dim,
            "num_classes": params.config.num_classes,
            "hidden_dim": params.config.hidden_dim,
            "readout": params.config.readout,
            "activation": params.config.activation,
        },
        "envs": list(params.envs),
    }
    entries = dict(params.values)
    entries["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(entries)))
        for key in sorted(entries):
            arr = np.ascontiguousarray(entries[key])
            name = key.encode("utf-8")
            dtype = arr.dtype.str.encode("ascii")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", len(dtype)))
            fh.write(dtype)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            fh.write(arr.tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise VersionMismatchError(f"{path} is not a recognized checkpoint")
    at = len(CHECKPOINT_MAGIC)
    (count,) = struct.unpack_from("<I", blob, at)
    at += 4
    entries: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<H", blob, at)
            at += 2
            name = blob[at : at + name_len].decode("utf-8")
            at += name_len
            (dtype_len,) = struct.unpack_from("<B", blob, at)
            at += 1
            dtype = np.dtype(blob[at : at + dtype_len].decode("ascii"))
            at += dtype_len
            (ndim,) = struct.unpack_from("<B", blob, at)
            at += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, at) if ndim else ()
            at += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64)) if shape else 1
            nbytes = size * dtype.itemsize
            entries[name] = np.frombuffer(blob[at : at + nbytes], dtype=dtype).reshape(shape).copy()
            at += nbytes
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if "__meta__" not in entries:
        raise FormatError("checkpoint lacks metadata record")
    meta = json.loads(entries.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("version") != 1:
        raise VersionMismatchError(f"checkpoint version {meta.get('version')!r} unsupported")
    config = ModelConfig(**meta["config"])
    return ModelParams(values=entries, config=config, envs=tuple(meta["envs"]))
