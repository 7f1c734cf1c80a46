"""Label-free test-domain adaptation.

Given a trained model and an unlabeled test pool, four steps produce the
final predictor:

1. ``pseudo_label``: invariant-pathway predictions give hard pseudo-labels
   (argmax, lowest class index on ties) or sampled ones.
2. ``fit_variant_classifier``: a fresh head is fit by cross-entropy on
   frozen variant-extractor features against the pseudo-labels.  Only the
   head moves; the extractor parameters are untouched.
3. ``calibrate_head``: flip rates (binary) or the confusion matrix
   (multiclass) are estimated from the invariant predictive probabilities
   over the pool, and the biased head is wrapped with the corresponding
   inverse.
4. ``predict_ensemble``: the invariant prediction and the calibrated
   variant prediction are combined in logit space, using the empirical
   pseudo-label distribution as the prior (the pseudo-label marginal
   matches the label marginal under the distribution-matching assumption).

Inference here is deterministic: the subgraph weights used for prediction
are the mask probabilities themselves rather than samples.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .causation import (
    CalibrationStats,
    calibrate_binary,
    calibrate_multiclass,
    combine_multiclass,
    estimate_confusion_multiclass,
    estimate_flip_rates_binary,
)
from .data import Graph
from .errors import (
    CalibrationDegeneracyError,
    InputValidationError,
    SingleClassPseudoLabelsError,
)
from .model import (
    ModelParams,
    classify_tape,
    edge_logits_tape,
    encode_tape,
    init_variant_head,
    pack,
    params_to_nodes,
    readout_tape,
)
from .training import Adam

PSEUDO_LABEL_MODES = ("argmax", "sample")
CALIBRATION_MODES = ("binary", "multiclass")
COMBINE_MODES = ("corrected", "paper")


@dataclass(frozen=True)
class AdaptConfig:
    learning_rate: float = 0.0001
    epochs: int = 100
    batch_size: int = 64
    seed: int = 0
    pseudo_label_mode: str = "argmax"
    calibration_mode: str | None = None  # None: binary iff two classes
    combine_mode: str = "corrected"
    no_ensemble: bool = False

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise InputValidationError("adaptation rates and sizes must be positive")
        if self.pseudo_label_mode not in PSEUDO_LABEL_MODES:
            raise InputValidationError(f"pseudo_label_mode must be one of {PSEUDO_LABEL_MODES}")
        if self.calibration_mode is not None and self.calibration_mode not in CALIBRATION_MODES:
            raise InputValidationError(f"calibration_mode must be one of {CALIBRATION_MODES}")
        if self.combine_mode not in COMBINE_MODES:
            raise InputValidationError(f"combine_mode must be one of {COMBINE_MODES}")


# ---------------------------------------------------------------------------
# Deterministic inference paths
# ---------------------------------------------------------------------------


def _soft_mask_forward(
    graphs: Sequence[Graph],
    params: ModelParams,
    kind: str,
    *,
    head: str | None,
    chunk: int = 256,
):
    """Pooled representations and optional head log-probs with edge weights
    equal to the mask probabilities (expected-subgraph inference)."""
    encoder = "enc_c" if kind == "invariant" else "enc_s"
    pooled_out, logp_out = [], []
    for start in range(0, len(graphs), chunk):
        packed = pack(list(graphs[start : start + chunk]))
        nodes = params_to_nodes(params)
        z = encode_tape(nodes, encoder, packed, None, params.config)
        probs = ad.sigmoid(edge_logits_tape(z, packed))
        h = encode_tape(nodes, encoder, packed, probs, params.config)
        pooled_out.append(readout_tape(h, packed, params.config).value)
        if head is not None:
            logp_out.append(classify_tape(nodes, packed, h, params.config, head=head).value)
    pooled = np.concatenate(pooled_out, axis=0)
    return (pooled, np.concatenate(logp_out, axis=0)) if head is not None else (pooled, None)


def invariant_predictions(graphs: Sequence[Graph], params: ModelParams) -> np.ndarray:
    """Predictive simplices (n, K) of the invariant pathway."""
    _, logp = _soft_mask_forward(graphs, params, "invariant", head="head_c")
    return np.exp(logp)


def variant_features(graphs: Sequence[Graph], params: ModelParams) -> np.ndarray:
    """Frozen variant-extractor pooled representations (n, hidden)."""
    pooled, _ = _soft_mask_forward(graphs, params, "variant", head=None)
    return pooled


# ---------------------------------------------------------------------------
# Step 1: pseudo-labels
# ---------------------------------------------------------------------------


def sample_categorical(soft: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One draw per row from row-stochastic ``soft``."""
    cum = np.cumsum(soft, axis=1)
    u = rng.uniform(size=(soft.shape[0], 1))
    return (u > cum[:, :-1]).sum(axis=1).astype(np.int64)


def pseudo_label(
    graphs: Sequence[Graph],
    params: ModelParams,
    mode: str = "argmax",
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Hard pseudo-labels plus the soft predictive simplices behind them.

    ``argmax`` breaks ties toward the lowest class index; ``sample`` draws
    from the predictive distribution with a fixed seed.
    """
    if mode not in PSEUDO_LABEL_MODES:
        raise InputValidationError(f"mode must be one of {PSEUDO_LABEL_MODES}")
    if not graphs:
        raise InputValidationError("test pool is empty")
    soft = invariant_predictions(graphs, params)
    if mode == "argmax":
        hard = np.argmax(soft, axis=1).astype(np.int64)
    else:
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed,))))
        hard = sample_categorical(soft, rng)
    return hard, soft


# ---------------------------------------------------------------------------
# Step 2: biased variant head
# ---------------------------------------------------------------------------


def _head_log_probs(head: Mapping[str, np.ndarray], features: np.ndarray) -> np.ndarray:
    nodes = {k: Var(v) for k, v in head.items()}
    x = Var(features)
    h = ad.tanh(x @ nodes["head/W1"] + nodes["head/b1"])
    h = ad.tanh(h @ nodes["head/W2"] + nodes["head/b2"])
    return ad.log_softmax(h @ nodes["head/W3"] + nodes["head/b3"]).value


def fit_variant_classifier(
    graphs: Sequence[Graph],
    pseudo_labels: np.ndarray,
    params: ModelParams,
    config: AdaptConfig,
) -> dict[str, np.ndarray]:
    """Fit a fresh variant head on frozen features against pseudo-labels.

    Returns the head parameter dict; ``params`` is never modified.
    """
    pseudo_labels = np.asarray(pseudo_labels, dtype=np.int64)
    if np.unique(pseudo_labels).size < 2:
        raise SingleClassPseudoLabelsError(
            "all pseudo-labels fall in one class; the biased head cannot be fit "
            "and flip-rate calibration is undefined"
        )
    features = variant_features(graphs, params)
    head = init_variant_head(params.config, seed=config.seed)
    optimizer = Adam(head, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)
    n = features.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            nodes = {k: Var(v) for k, v in head.items()}
            x = Var(features[idx])
            h = ad.tanh(x @ nodes["head/W1"] + nodes["head/b1"])
            h = ad.tanh(h @ nodes["head/W2"] + nodes["head/b2"])
            logp = ad.log_softmax(h @ nodes["head/W3"] + nodes["head/b3"])
            loss = -ad.mean(ad.take_per_row(logp, pseudo_labels[idx]))
            ad.backward(loss)
            optimizer.step(head, {k: nodes[k].grad for k in head if nodes[k].grad is not None})
    return head


# ---------------------------------------------------------------------------
# Step 3: calibration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CalibratedHead:
    """A biased variant head wrapped with its flip-rate inverse."""

    head: Mapping[str, np.ndarray]
    stats: CalibrationStats
    mode: str  # "binary" | "multiclass"

    def biased(self, features: np.ndarray) -> np.ndarray:
        return np.exp(_head_log_probs(self.head, features))

    def predict(self, features: np.ndarray) -> np.ndarray:
        """Calibrated predictive simplices, clipped back into the simplex."""
        biased = self.biased(features)
        out = np.zeros_like(biased)
        if self.mode == "binary":
            for i, row in enumerate(biased):
                p1 = calibrate_binary(row[1], self.stats)
                out[i] = (1.0 - p1, p1)
        else:
            for i, row in enumerate(biased):
                out[i] = calibrate_multiclass(row, self.stats)
        return out


def estimate_calibration_stats(
    invariant_soft: np.ndarray, mode: str
) -> CalibrationStats:
    """Flip rates / confusion from invariant predictive probabilities."""
    if mode == "binary":
        if invariant_soft.shape[1] != 2:
            raise InputValidationError("binary calibration needs a two-class model")
        return estimate_flip_rates_binary(invariant_soft[:, 1])
    return estimate_confusion_multiclass(invariant_soft)


def calibrate_head(
    graphs: Sequence[Graph],
    params: ModelParams,
    head: Mapping[str, np.ndarray],
    mode: str | None = None,
) -> CalibratedHead:
    """Wrap a biased head with the inverse estimated from the test pool.

    Degenerate statistics (flip rates summing to one, or a numerically
    singular confusion) mean the pseudo-labels are independent of the true
    labels and no inverse exists.
    """
    k = params.config.num_classes
    if mode is None:
        mode = "binary" if k == 2 else "multiclass"
    if mode not in CALIBRATION_MODES:
        raise InputValidationError(f"mode must be one of {CALIBRATION_MODES}")
    if mode == "binary" and k != 2:
        raise InputValidationError(f"binary calibration requires 2 classes, model has {k}")
    soft = invariant_predictions(graphs, params)
    stats = estimate_calibration_stats(soft, mode)
    if mode == "binary" and stats.is_degenerate(tol=1e-9):
        raise CalibrationDegeneracyError(
            "estimated flip rates sum to 1: pseudo-labels are independent of "
            "the true label on this pool and cannot be calibrated"
        )
    if mode == "multiclass":
        cond = float(np.linalg.cond(stats.confusion))
        if not np.isfinite(cond) or cond > 1e12:
            raise CalibrationDegeneracyError(
                "estimated confusion matrix is numerically singular: "
                "pseudo-labels carry no invertible label signal on this pool"
            )
    return CalibratedHead(head=dict(head), stats=stats, mode=mode)


# ---------------------------------------------------------------------------
# Step 4: ensemble
# ---------------------------------------------------------------------------


def predict_ensemble(
    invariant_probs: np.ndarray,
    calibrated_probs: np.ndarray | None,
    prior: np.ndarray,
    combine_mode: str = "corrected",
    no_ensemble: bool = False,
) -> np.ndarray:
    """Combine per-row predictive simplices; rows pass through untouched
    (bitwise) when ``no_ensemble`` is set or no variant prediction exists."""
    invariant_probs = np.asarray(invariant_probs)
    if no_ensemble or calibrated_probs is None:
        return invariant_probs
    out = np.zeros_like(invariant_probs)
    for i in range(invariant_probs.shape[0]):
        out[i] = combine_multiclass(
            invariant_probs[i], calibrated_probs[i], prior, mode=combine_mode
        )
    return out


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


@dataclass
class AdaptResult:
    pseudo_labels: np.ndarray
    invariant_probs: np.ndarray
    variant_probs: np.ndarray | None  # calibrated
    combined_probs: np.ndarray
    prior: np.ndarray
    calibrated: CalibratedHead | None
    config: AdaptConfig


def adapt(
    test_graphs: Sequence[Graph],
    params: ModelParams,
    config: AdaptConfig | None = None,
) -> AdaptResult:
    """Run the pseudo-label / fit / calibrate / ensemble pipeline."""
    config = config or AdaptConfig()
    hard, soft = pseudo_label(
        test_graphs, params, mode=config.pseudo_label_mode, seed=config.seed
    )
    k = params.config.num_classes
    prior = np.bincount(hard, minlength=k).astype(np.float64) / hard.size
    if config.no_ensemble:
        return AdaptResult(
            pseudo_labels=hard,
            invariant_probs=soft,
            variant_probs=None,
            combined_probs=soft,
            prior=prior,
            calibrated=None,
            config=config,
        )
    head = fit_variant_classifier(test_graphs, hard, params, config)
    calibrated = calibrate_head(test_graphs, params, head, mode=config.calibration_mode)
    features = variant_features(test_graphs, params)
    variant_probs = calibrated.predict(features)
    combined = predict_ensemble(
        soft, variant_probs, prior, combine_mode=config.combine_mode
    )
    return AdaptResult(
        pseudo_labels=hard,
        invariant_probs=soft,
        variant_probs=variant_probs,
        combined_probs=combined,
        prior=prior,
        calibrated=calibrated,
        config=config,
    )


def write_predictions(result: AdaptResult, graphs: Sequence[Graph], path) -> None:
    """One JSON record per graph.

    With the ensemble disabled there is no variant or combined prediction,
    and those columns are absent rather than null."""
    with open(path, "w", encoding="utf-8") as fh:
        for i, g in enumerate(graphs):
            rec = {
                "graph_id": g.graph_id,
                "invariant": [float(x) for x in result.invariant_probs[i]],
                "pseudo_label": int(result.pseudo_labels[i]),
                "true_label": int(g.label),
            }
            if result.variant_probs is not None:
                rec["variant"] = [float(x) for x in result.variant_probs[i]]
                rec["combined"] = [float(x) for x in result.combined_probs[i]]
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def accuracy(probs: np.ndarray, labels: Sequence[int]) -> float:
    return float((np.argmax(probs, axis=1) == np.asarray(labels)).mean())
