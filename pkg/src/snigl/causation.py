"""Probability algebra for necessity/sufficiency bounds, pseudo-label
calibration, and logit-space combination of two predictors.

Three families of pure functions live here, in binary and multiclass form:

* ``pns_lower_bound`` turns three observational quantities into a lower
  bound on the probability that a cause is necessary *and* sufficient::

      max( (P(Y=y|C=c) - P(Y=y)) / (1 - E[P(C=c|G)]), 0 )

* flip-rate / confusion estimation and its inverse.  If a pseudo-label
  agrees in distribution with the predictor that produced it, its flip
  rates are moment ratios of the predictive probabilities,

      eps1 = E[p^2] / E[p],    eps0 = E[(1-p)^2] / E[1-p],

  and the observed pseudo-label rate inverts affinely back to the true
  conditional: ``p = (p_hat + eps0 - 1) / (eps0 + eps1 - 1)``.  The K-class
  analogue is a column-stochastic confusion matrix and a linear solve.

* combination of an invariant and a variant predictor that are
  conditionally independent given the label.  The exact posterior is

      sigma( logit(p_c) + logit(p_s) - logit(prior) )

  (division by the prior in the K-class product form).  A ``paper`` mode is
  kept for auditability: it *adds* the prior logit (multiplies by the
  prior), which agrees with the corrected form only at uniform priors.

All inputs are plain floats / numpy arrays; probabilities are clamped to
``[CLAMP, 1 - CLAMP]`` before any logit, and calibrated outputs are clipped
back to the simplex, since finite-sample estimates can leave it.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    CalibrationDegeneracyError,
    DegenerateDenominatorError,
    DivisionGuardError,
    FormatError,
    IllConditionedWarning,
    InputValidationError,
    SingularMatrixError,
    VersionMismatchError,
)

CLAMP = 1e-6
DEGENERACY_TOL = 1e-9
MEAN_FLOOR = 1e-12
CONDITION_CAP = 1e8

STATS_FORMAT_HEADER = "snigl-calibration-stats v1"

COMBINE_MODES = ("corrected", "paper")


# ---------------------------------------------------------------------------
# Validation helpers
# ---------------------------------------------------------------------------


def require_prob(value, name: str = "probability") -> float:
    """Check a scalar probability; tiny float excursions are clipped."""
    x = float(value)
    if not math.isfinite(x):
        raise InputValidationError(f"{name} must be finite, got {value!r}")
    if x < -MEAN_FLOOR or x > 1.0 + MEAN_FLOOR:
        raise InputValidationError(f"{name} must lie in [0, 1], got {x}")
    return min(max(x, 0.0), 1.0)


def require_simplex(values, name: str = "simplex") -> np.ndarray:
    vec = np.asarray(values, dtype=np.float64)
    if vec.ndim != 1 or vec.size < 2:
        raise InputValidationError(f"{name} must be a vector over >= 2 classes")
    if not np.all(np.isfinite(vec)):
        raise InputValidationError(f"{name} has non-finite entries")
    if np.any(vec < -DEGENERACY_TOL) or np.any(vec > 1.0 + DEGENERACY_TOL):
        raise InputValidationError(f"{name} entries must lie in [0, 1]")
    if abs(float(vec.sum()) - 1.0) > DEGENERACY_TOL:
        raise InputValidationError(f"{name} sums to {vec.sum()!r}, not 1")
    return np.clip(vec, 0.0, 1.0)


def _clamped(p: float, clamp: float = CLAMP) -> float:
    return min(max(p, clamp), 1.0 - clamp)


def logit(p: float, clamp: float = CLAMP) -> float:
    p = _clamped(require_prob(p, "logit argument"), clamp)
    return math.log(p) - math.log1p(-p)


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PnsBound:
    """Observational lower bound on necessity-and-sufficiency, with the
    cause/effect values it refers to."""

    value: float
    cause_value: object = None
    effect_value: object = None


@dataclass(frozen=True)
class CalibrationStats:
    """Flip rates linking pseudo-labels to true labels.

    ``kind == "binary"`` carries ``eps1 = P(pseudo=1 | true=1)`` and
    ``eps0 = P(pseudo=0 | true=0)``; ``kind == "multiclass"`` carries the
    column-stochastic confusion ``M[i, j] = P(pseudo=i | true=j)``.
    Degenerate statistics (rates summing to one / singular confusion) are
    representable, because estimators legitimately produce them; the
    calibration functions refuse to use them.
    """

    kind: str
    eps0: float | None = None
    eps1: float | None = None
    confusion: np.ndarray | None = None

    def __post_init__(self):
        if self.kind == "binary":
            if self.eps0 is None or self.eps1 is None:
                raise InputValidationError("binary stats need eps0 and eps1")
            object.__setattr__(self, "eps0", require_prob(self.eps0, "eps0"))
            object.__setattr__(self, "eps1", require_prob(self.eps1, "eps1"))
        elif self.kind == "multiclass":
            m = np.asarray(self.confusion, dtype=np.float64)
            if m.ndim != 2 or m.shape[0] != m.shape[1] or m.shape[0] < 2:
                raise InputValidationError("confusion must be a square K x K matrix, K >= 2")
            if np.any(m < -DEGENERACY_TOL) or np.any(
                np.abs(m.sum(axis=0) - 1.0) > DEGENERACY_TOL
            ):
                raise InputValidationError("confusion columns must each sum to 1")
            object.__setattr__(self, "confusion", m)
        else:
            raise InputValidationError(f"unknown stats kind {self.kind!r}")

    @staticmethod
    def binary(eps0: float, eps1: float) -> "CalibrationStats":
        return CalibrationStats(kind="binary", eps0=eps0, eps1=eps1)

    @staticmethod
    def multiclass(confusion: np.ndarray) -> "CalibrationStats":
        return CalibrationStats(kind="multiclass", confusion=confusion)

    @property
    def num_classes(self) -> int:
        return 2 if self.kind == "binary" else int(self.confusion.shape[0])

    def is_degenerate(self, tol: float = DEGENERACY_TOL) -> bool:
        """True when the calibration inverse does not exist."""
        if self.kind == "binary":
            return abs(self.eps0 + self.eps1 - 1.0) <= tol
        return abs(float(np.linalg.det(self.confusion))) <= tol

    # -- versioned key/value text record ------------------------------------

    def to_text(self) -> str:
        lines = [STATS_FORMAT_HEADER, f"kind={self.kind}"]
        if self.kind == "binary":
            lines += [f"eps0={self.eps0!r}", f"eps1={self.eps1!r}"]
        else:
            k = self.num_classes
            flat = ",".join(repr(float(v)) for v in self.confusion.reshape(-1))
            lines += [f"K={k}", f"confusion={flat}"]
        return "\n".join(lines) + "\n"

    @staticmethod
    def from_text(text: str) -> "CalibrationStats":
        lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
        if not lines:
            raise FormatError("empty calibration record", 1)
        if lines[0] != STATS_FORMAT_HEADER:
            raise VersionMismatchError(
                f"expected {STATS_FORMAT_HEADER!r}, found {lines[0]!r}", 1
            )
        fields: dict[str, str] = {}
        for lineno, line in enumerate(lines[1:], start=2):
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"expected key=value, found {line!r}", lineno)
            fields[key] = value
        try:
            if fields["kind"] == "binary":
                return CalibrationStats.binary(float(fields["eps0"]), float(fields["eps1"]))
            if fields["kind"] == "multiclass":
                k = int(fields["K"])
                flat = np.array([float(v) for v in fields["confusion"].split(",")])
                return CalibrationStats.multiclass(flat.reshape(k, k))
            raise FormatError(f"unknown kind {fields['kind']!r}")
        except KeyError as exc:
            raise FormatError(f"missing field {exc.args[0]!r}") from exc
        except ValueError as exc:
            raise FormatError(f"malformed field: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    @staticmethod
    def load(path) -> "CalibrationStats":
        with open(path, encoding="utf-8") as fh:
            return CalibrationStats.from_text(fh.read())


# ---------------------------------------------------------------------------
# Lower bound
# ---------------------------------------------------------------------------


def pns_lower_bound(
    p_y_given_c: float,
    p_y: float,
    mean_p_c: float,
    *,
    cause_value: object = None,
    effect_value: object = None,
    delta: float = 1e-6,
) -> PnsBound:
    """Observational lower bound on PNS(cause=c, effect=y).

    ``mean_p_c`` is the average cause probability ``E[P(C=c|G)]``, which by
    total probability equals the cause marginal ``P(C=c)``; the bound blows
    up as it approaches one, hence the ``delta`` guard.  The result is
    clamped into [0, 1]: the true quantity is a probability, and estimated
    numerators can overshoot.
    """
    p_y_given_c = require_prob(p_y_given_c, "p_y_given_c")
    p_y = require_prob(p_y, "p_y")
    mean_p_c = require_prob(mean_p_c, "mean_p_c")
    if mean_p_c >= 1.0 - delta:
        raise DegenerateDenominatorError(
            f"mean cause probability {mean_p_c} within {delta} of 1"
        )
    raw = (p_y_given_c - p_y) / (1.0 - mean_p_c)
    return PnsBound(
        value=min(max(raw, 0.0), 1.0),
        cause_value=cause_value,
        effect_value=effect_value,
    )


# ---------------------------------------------------------------------------
# Flip rates and calibration
# ---------------------------------------------------------------------------


def _weighted_mean(values: np.ndarray, weights: np.ndarray | None) -> float:
    if weights is None:
        return float(values.mean())
    return float(np.average(values, weights=weights))


def estimate_flip_rates_binary(
    p_y1_given_c: Sequence[float],
    weights: Sequence[float] | None = None,
) -> CalibrationStats:
    """Flip rates of a pseudo-label matched in distribution to its predictor.

    ``p_y1_given_c`` holds one predictive probability P(Y=1|C) per sample of
    C; optional ``weights`` turn the sample means into exact expectations
    when the C-distribution is known analytically.
    """
    p = np.asarray(p_y1_given_c, dtype=np.float64)
    if p.size == 0:
        raise InputValidationError("need at least one predictive probability")
    if np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p)):
        raise InputValidationError("predictive probabilities must lie in [0, 1]")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    mean_p = _weighted_mean(p, w)
    mean_q = _weighted_mean(1.0 - p, w)
    if mean_p < MEAN_FLOOR:
        raise DivisionGuardError(f"mean P(Y=1|C) = {mean_p:.3e} is numerically zero")
    if mean_q < MEAN_FLOOR:
        raise DivisionGuardError(f"mean P(Y=0|C) = {mean_q:.3e} is numerically zero")
    eps1 = _weighted_mean(p * p, w) / mean_p
    eps0 = _weighted_mean((1.0 - p) ** 2, w) / mean_q
    return CalibrationStats.binary(eps0=eps0, eps1=eps1)


def calibrate_binary(p_hat_y1: float, stats: CalibrationStats) -> float:
    """Invert pseudo-label noise: recover P(Y=1|.) from P(pseudo=1|.)."""
    if stats.kind != "binary":
        raise InputValidationError("binary calibration requires binary stats")
    p_hat_y1 = require_prob(p_hat_y1, "p_hat_y1")
    denom = stats.eps0 + stats.eps1 - 1.0
    if abs(denom) <= DEGENERACY_TOL:
        raise CalibrationDegeneracyError(
            "flip rates sum to 1: the pseudo-label is independent of the true "
            "label and the calibration inverse does not exist"
        )
    raw = (p_hat_y1 + stats.eps0 - 1.0) / denom
    return min(max(raw, 0.0), 1.0)


def estimate_confusion_multiclass(
    p_y_given_c: Sequence[Sequence[float]],
    weights: Sequence[float] | None = None,
) -> CalibrationStats:
    """K-class confusion of a distribution-matched pseudo-label.

    Row ``t`` of the input is the predictive simplex P(Y=.|C=c_t); the
    result has ``M[i, j] = E[p_i p_j] / E[p_j]``, one column per true class,
    each column summing to one by construction.
    """
    rows = np.asarray(p_y_given_c, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[0] == 0:
        raise InputValidationError("need a non-empty matrix of predictive simplices")
    k = rows.shape[1]
    if k < 2:
        raise InputValidationError("need at least two classes")
    for t in range(rows.shape[0]):
        require_simplex(rows[t], f"predictive row {t}")
    w = None if weights is None else np.asarray(weights, dtype=np.float64)
    if w is None:
        cross = rows.T @ rows / rows.shape[0]  # E[p_i p_j]
        col = rows.mean(axis=0)  # E[p_j]
    else:
        cross = (rows * w[:, None]).T @ rows / w.sum()
        col = np.average(rows, axis=0, weights=w)
    if np.any(col < MEAN_FLOOR):
        bad = int(np.argmin(col))
        raise DivisionGuardError(f"mean P(Y={bad}|C) = {col[bad]:.3e} is numerically zero")
    return CalibrationStats.multiclass(cross / col[None, :])


def calibrate_multiclass(
    p_hat: Sequence[float],
    stats: CalibrationStats,
    *,
    condition_cap: float = CONDITION_CAP,
) -> np.ndarray:
    """Solve ``M h = p_hat`` for the true class distribution ``h``.

    Negative solution entries are clipped to zero and the vector is
    renormalized; a finite-sample ``p_hat`` need not lie in the simplex
    image of ``M``.  Ill-conditioned confusions beyond ``condition_cap``
    emit :class:`IllConditionedWarning` because the inversion amplifies
    estimation noise.
    """
    if stats.kind != "multiclass":
        raise InputValidationError("multiclass calibration requires a confusion matrix")
    p_hat = require_simplex(p_hat, "p_hat")
    m = stats.confusion
    if p_hat.size != m.shape[0]:
        raise InputValidationError(
            f"p_hat has {p_hat.size} classes, confusion has {m.shape[0]}"
        )
    cond = float(np.linalg.cond(m))
    if not math.isfinite(cond) or abs(float(np.linalg.det(m))) < 1e-300:
        raise SingularMatrixError("confusion matrix is singular")
    if cond > condition_cap:
        warnings.warn(
            f"confusion condition number {cond:.3e} exceeds cap {condition_cap:.1e}; "
            "calibrated probabilities amplify pseudo-label noise",
            IllConditionedWarning,
            stacklevel=2,
        )
    try:
        h = np.linalg.solve(m, p_hat)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError("confusion matrix is singular") from exc
    h = np.clip(h, 0.0, None)
    total = float(h.sum())
    if total < MEAN_FLOOR:
        raise DivisionGuardError("calibrated vector collapsed to zero mass")
    return h / total


# ---------------------------------------------------------------------------
# Combination of conditionally independent predictors
# ---------------------------------------------------------------------------


def combine_binary(
    p_c: float,
    p_s: float,
    prior: float,
    *,
    mode: str = "corrected",
    clamp: float = CLAMP,
) -> float:
    """Posterior P(Y=1 | both features) from two class-1 probabilities that
    are conditionally independent given the label.

    ``corrected`` subtracts the prior logit (the odds algebra answer);
    ``paper`` adds it, matching the historical printed form, and is exact
    only at ``prior = 1/2``.
    """
    if mode not in COMBINE_MODES:
        raise InputValidationError(f"mode must be one of {COMBINE_MODES}, got {mode!r}")
    z = logit(p_c, clamp) + logit(p_s, clamp)
    if mode == "corrected":
        z -= logit(prior, clamp)
    else:
        z += logit(prior, clamp)
    return sigmoid(z)


def combine_multiclass(
    p_c: Sequence[float],
    p_s: Sequence[float],
    prior: Sequence[float],
    *,
    mode: str = "corrected",
    clamp: float = CLAMP,
) -> np.ndarray:
    """K-class combination: normalize ``p_c * p_s / prior`` elementwise.

    ``paper`` mode multiplies by the prior instead of dividing, agreeing
    with the corrected form only at the uniform prior.  All three inputs
    are clamped to be strictly positive and renormalized first.
    """
    if mode not in COMBINE_MODES:
        raise InputValidationError(f"mode must be one of {COMBINE_MODES}, got {mode!r}")
    pc = _clamped_simplex(require_simplex(p_c, "p_c"), clamp)
    ps = _clamped_simplex(require_simplex(p_s, "p_s"), clamp)
    pr = _clamped_simplex(require_simplex(prior, "prior"), clamp)
    if not (pc.size == ps.size == pr.size):
        raise InputValidationError("p_c, p_s and prior must share the class count")
    if mode == "corrected":
        q = pc * ps / pr
    else:
        q = pc * ps * pr
    return q / q.sum()


def _clamped_simplex(vec: np.ndarray, clamp: float) -> np.ndarray:
    out = np.clip(vec, clamp, 1.0 - clamp)
    return out / out.sum()
