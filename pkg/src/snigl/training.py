"""Risk terms and the optimization loop.

The step objective, summed over training environments ``e``::

    R_NS^e + R_INV^e + R_Joint^e + lambda * R_CI^e

* ``R_NS`` (necessity/sufficiency): per example, one subgraph sample ``c``
  drawn from the invariant mask; the integrand is
  ``(P(Y=y|E=e) - g(c)_y) / max(1 - mean_G P(C=c|G), 1e-3)`` with the
  denominator's expectation estimated over the batch by the
  similarity surrogate.  Minimizing it maximizes the observational
  necessity-and-sufficiency lower bound in expectation.
* ``R_INV``: cross-entropy of the invariant head on invariant samples plus
  a supervised contrastive term over the union of all environment batches
  (temperature-scaled cosine similarities; positives are same-class graphs,
  across environments).
* ``R_Joint``: cross-entropy of the logit-space combination of the
  invariant prediction with the environment's variant head prediction
  against the environment's empirical label distribution as the prior.
* ``R_CI``: kernel conditional-dependence statistic (Gaussian kernels with
  detached median-heuristic bandwidths, ridge-regression conditioning on
  labels) pushing the two pooled representations toward conditional
  independence given the label.

Relative weights are not tunable: the three main terms are summed as-is,
with a single ``lambda`` on the conditional-independence penalty.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Var
from .data import Dataset, Graph
from .errors import (
    InputValidationError,
    NonFiniteLossError,
    UnknownEnvironmentError,
)
from .model import (
    ModelConfig,
    ModelParams,
    PackedBatch,
    classify_tape,
    edge_logits_tape,
    encode_tape,
    init_params,
    pack,
    params_to_nodes,
    readout_tape,
    sample_weights_tape,
)

OBJECTIVES = ("full", "no_pns", "erm")

DENOMINATOR_FLOOR = 1e-3
PRIOR_CLAMP = 1e-6
HSCIC_RIDGE = 1e-3
BANDWIDTH_FLOOR = 1e-6


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings; defaults are the desk-scale profile."""

    lambda_ci: float = 0.001
    learning_rate: float = 0.001
    max_epochs: int = 60
    batch_size: int = 64
    seed: int = 0
    k: int = 8  # mask samples for the P(C=c|G) surrogate
    tau_start: float = 1.0
    tau_end: float = 0.3
    hidden_dim: int = 32
    readout: str = "mean"
    activation: str = "tanh"
    contrastive_temperature: float = 0.5
    pns_samples: int = 1
    no_pns: bool = False
    no_ensemble: bool = False

    def __post_init__(self):
        if self.lambda_ci < 0:
            raise InputValidationError("lambda_ci must be >= 0")
        if min(self.learning_rate, self.tau_start, self.tau_end) <= 0:
            raise InputValidationError("rates and temperatures must be positive")
        if min(self.max_epochs, self.batch_size, self.k, self.pns_samples, self.hidden_dim) < 1:
            raise InputValidationError("sizes must be positive integers")

    def tau_at(self, epoch: int) -> float:
        if self.max_epochs <= 1:
            return self.tau_end
        frac = epoch / (self.max_epochs - 1)
        return self.tau_start + (self.tau_end - self.tau_start) * frac


@dataclass(frozen=True)
class RiskBreakdown:
    """Per-environment epoch averages of the four risk terms."""

    epoch: int
    env: str
    r_ns: float
    r_inv: float
    r_joint: float
    r_ci: float
    lambda_ci: float
    train_acc: float

    @property
    def total(self) -> float:
        return self.r_ns + self.r_inv + self.r_joint + self.lambda_ci * self.r_ci

    def record(self) -> dict:
        return {
            "epoch": self.epoch,
            "env": self.env,
            "r_ns": self.r_ns,
            "r_inv": self.r_inv,
            "r_joint": self.r_joint,
            "r_ci": self.r_ci,
            "total": self.total,
            "train_acc": self.train_acc,
        }


# ---------------------------------------------------------------------------
# Tape-level pieces
# ---------------------------------------------------------------------------


def pns_fraction(
    marginal_probs: np.ndarray,
    model_probs: Var,
    mean_similarity: Var,
    floor: float = DENOMINATOR_FLOOR,
) -> Var:
    """Mean of ``(P(y|E) - g(c)_y) / max(1 - E[P(C=c|G)], floor)``."""
    denom = ad.clip_lower(Var(1.0) - mean_similarity, floor)
    return ad.mean((Var(np.asarray(marginal_probs)) - model_probs) / denom)


@dataclass
class EnvForward:
    """Everything one environment batch contributes to the step objective."""

    packed: PackedBatch
    logp_c: Var  # (B, K) invariant head log-probs on the c sample
    logp_s: Var  # (B, K) env variant head log-probs on the s sample
    pooled_c: Var  # (B, h)
    pooled_s: Var  # (B, h)
    mean_similarity: Var  # (B,) batch estimate of E_G[P(C=c_i|G)]
    clamp_fraction: float


def env_forward(
    nodes: Mapping[str, Var],
    packed: PackedBatch,
    env: str,
    config: ModelConfig,
    train_config: TrainConfig,
    rng: np.random.Generator,
    tau: float,
    *,
    need_similarity: bool = True,
    need_variant: bool = True,
) -> EnvForward:
    e = packed.num_edges
    z_c = encode_tape(nodes, "enc_c", packed, None, config)
    c_logits = edge_logits_tape(z_c, packed)
    c_weights = sample_weights_tape(c_logits, rng.uniform(size=e), tau)
    h_c = encode_tape(nodes, "enc_c", packed, c_weights, config)
    pooled_c = readout_tape(h_c, packed, config)
    logp_c = classify_tape(nodes, packed, h_c, config, head="head_c")

    if need_variant:
        z_s = encode_tape(nodes, "enc_s", packed, None, config)
        s_logits = edge_logits_tape(z_s, packed)
        s_weights = sample_weights_tape(s_logits, rng.uniform(size=e), tau)
        h_s = encode_tape(nodes, "enc_s", packed, s_weights, config)
        pooled_s = readout_tape(h_s, packed, config)
        logp_s = classify_tape(nodes, packed, h_s, config, head=f"head_s/{env}")
    else:
        pooled_s = logp_s = None

    mean_similarity = None
    clamp_fraction = 0.0
    if need_similarity:
        sims = []
        for _ in range(train_config.k):
            w = sample_weights_tape(c_logits, rng.uniform(size=e), tau)
            h = encode_tape(nodes, "enc_c", packed, w, config)
            rep = readout_tape(h, packed, config)
            sims.append(ad.sigmoid(rep @ ad.transpose(pooled_c)))  # (B, B)
        stack_mean = sims[0]
        for s in sims[1:]:
            stack_mean = stack_mean + s
        sim = stack_mean * (1.0 / len(sims))
        mean_similarity = ad.mean(sim, axis=0)  # over graphs j, per sample c_i
        clamp_fraction = float(np.mean(1.0 - mean_similarity.value < DENOMINATOR_FLOOR))

    return EnvForward(
        packed=packed,
        logp_c=logp_c,
        logp_s=logp_s,
        pooled_c=pooled_c,
        pooled_s=pooled_s,
        mean_similarity=mean_similarity,
        clamp_fraction=clamp_fraction,
    )


def cross_entropy(logp: Var, labels: np.ndarray) -> Var:
    return -ad.mean(ad.take_per_row(logp, labels))


def supervised_contrastive(
    pooled: Var,
    labels: np.ndarray,
    temperature: float,
) -> Var | None:
    """Mean over anchors/positives of ``logsumexp_negatives - similarity``.

    Cosine similarities scaled by ``1/temperature``; the denominator runs
    over every other sample.  Returns ``None`` (with a warning) when no
    anchor has a positive, e.g. on a single-class batch.
    """
    labels = np.asarray(labels)
    if np.unique(labels).size < 2:
        warnings.warn("contrastive term skipped: single-class batch", stacklevel=2)
        return None
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    norm = ad.power(ad.sum_(pooled * pooled, axis=1, keepdims=True) + 1e-12, 0.5)
    z = pooled / norm
    sim = (z @ ad.transpose(z)) * (1.0 / temperature)
    b = labels.size
    diag_block = np.zeros((b, b))
    np.fill_diagonal(diag_block, -1e30)
    lse = ad.logsumexp(sim + Var(diag_block), axis=1)  # (B,)
    losses = []
    for i in range(b):
        pos = np.flatnonzero(same[i])
        if pos.size == 0:
            continue
        row = ad.take_rows(sim, np.array([i]))  # (1, B)
        pos_sims = ad.take_rows(ad.reshape(row, (b,)), pos)
        anchor_lse = ad.take_rows(lse, np.array([i]))
        losses.append(ad.mean(anchor_lse - pos_sims))
    total = losses[0]
    for piece in losses[1:]:
        total = total + piece
    return total * (1.0 / len(losses))


def combined_log_probs(
    logp_c: Var,
    logp_s: Var,
    prior: np.ndarray,
    mode: str = "corrected",
) -> Var:
    """Log of the normalized product combination, in log space throughout."""
    log_prior = np.log(np.clip(np.asarray(prior, dtype=np.float64), PRIOR_CLAMP, 1.0))
    if mode == "corrected":
        logq = logp_c + logp_s - Var(log_prior)
    elif mode == "paper":
        logq = logp_c + logp_s + Var(log_prior)
    else:
        raise InputValidationError(f"unknown combine mode {mode!r}")
    return ad.log_softmax(logq)


def _tape_median(flat: Var) -> Var:
    """Median of a 1-d tape vector as an order-statistic selection.

    The selection index is fixed at the evaluation point, so the result is
    differentiable almost everywhere (gradient flows into the middle
    element, or the mean of the two middle elements for even counts)."""
    order = np.argsort(flat.value, kind="stable")
    m = flat.value.size
    if m % 2 == 1:
        return ad.take_rows(flat, np.array([order[m // 2]]))
    pair = np.array([order[m // 2 - 1], order[m // 2]])
    return ad.mean(ad.take_rows(flat, pair), keepdims=True)


def _gaussian_kernel(x: Var, bandwidth_floor: float = BANDWIDTH_FLOOR) -> Var:
    """Gaussian kernel matrix with a median-heuristic bandwidth.

    The squared bandwidth is the median off-diagonal squared distance,
    floored at ``bandwidth_floor**2``; it lives on the tape, so gradients
    account for the bandwidth's dependence on the inputs."""
    sq = ad.sum_(x * x, axis=1, keepdims=True)
    d2 = ad.clip_lower(sq + ad.transpose(sq) - (x @ ad.transpose(x)) * 2.0, 0.0)
    n = x.shape[0]
    off_idx = np.flatnonzero(~np.eye(n, dtype=bool).reshape(-1))
    sigma2 = ad.clip_lower(
        _tape_median(ad.take_rows(ad.reshape(d2, (n * n,)), off_idx)),
        bandwidth_floor * bandwidth_floor,
    )
    return ad.exp(-(d2 * ad.power(sigma2 * 2.0, -1.0)))


def hscic_tape(
    x: Var,
    y: Var,
    labels: np.ndarray,
    num_classes: int,
    ridge: float = HSCIC_RIDGE,
) -> Var:
    """Conditional-dependence statistic of ``x`` and ``y`` given ``labels``.

    Ridge-regression weights over the label kernel are computed outside the
    tape (labels carry no gradient) and normalized per query so that a
    constant argument yields exactly zero.
    """
    n = x.shape[0]
    if n < 8:
        raise InputValidationError(f"conditional-dependence penalty needs a batch >= 8, got {n}")
    kx = _gaussian_kernel(x)
    ky = _gaussian_kernel(y)
    onehot = np.eye(num_classes)[np.asarray(labels)]
    d2 = ((onehot[:, None, :] - onehot[None, :, :]) ** 2).sum(-1)
    off = ~np.eye(n, dtype=bool)
    sigma2 = max(float(np.median(d2[off])), BANDWIDTH_FLOOR**2)
    kz = np.exp(-d2 / (2.0 * sigma2))
    w = np.linalg.solve(kz + n * ridge * np.eye(n), kz)
    w = w / np.maximum(w.sum(axis=0, keepdims=True), 1e-12)
    wv = Var(w)
    kxw = kx @ wv  # (n, n) columns indexed by query point
    kyw = ky @ wv
    t1 = ad.sum_(wv * ((kx * ky) @ wv), axis=0)
    t2 = ad.sum_(wv * (kxw * kyw), axis=0)
    t3 = ad.sum_(wv * kxw, axis=0) * ad.sum_(wv * kyw, axis=0)
    return ad.clip_lower(ad.mean(t1 - t2 * 2.0 + t3), 0.0)


# ---------------------------------------------------------------------------
# Public risk wrappers (numpy in, float out)
# ---------------------------------------------------------------------------


def _pack_env(graphs: Sequence[Graph]) -> PackedBatch:
    return pack(list(graphs))


def pns_risk(
    graphs: Sequence[Graph],
    params: ModelParams,
    env_marginal: np.ndarray,
    *,
    k: int = 8,
    tau: float = 0.5,
    seed: int = 0,
) -> float:
    """Batch value of the necessity/sufficiency risk for one environment."""
    packed = _pack_env(graphs)
    nodes = params_to_nodes(params)
    rng = np.random.default_rng(seed)
    cfg = replace(TrainConfig(), k=k)
    fwd = env_forward(nodes, packed, "", params.config, cfg, rng, tau, need_variant=False)
    model_probs = ad.exp(ad.take_per_row(fwd.logp_c, packed.labels))
    marg = np.asarray(env_marginal)[packed.labels]
    return float(pns_fraction(marg, model_probs, fwd.mean_similarity).value)


def invariant_risk(
    graphs: Sequence[Graph],
    params: ModelParams,
    *,
    tau: float = 0.5,
    seed: int = 0,
    contrastive_temperature: float = 0.5,
) -> float:
    """Cross-entropy plus the supervised contrastive term on one batch."""
    packed = _pack_env(graphs)
    nodes = params_to_nodes(params)
    rng = np.random.default_rng(seed)
    fwd = env_forward(
        nodes, packed, "", params.config, TrainConfig(), rng, tau,
        need_similarity=False, need_variant=False,
    )
    loss = cross_entropy(fwd.logp_c, packed.labels)
    contrast = supervised_contrastive(fwd.pooled_c, packed.labels, contrastive_temperature)
    if contrast is not None:
        loss = loss + contrast
    return float(loss.value)


def joint_risk(
    graphs: Sequence[Graph],
    params: ModelParams,
    env: str,
    prior: np.ndarray,
    *,
    tau: float = 0.5,
    seed: int = 0,
    mode: str = "corrected",
) -> float:
    """Cross-entropy of the combined invariant/variant prediction."""
    if env not in params.envs:
        raise UnknownEnvironmentError(f"unknown environment {env!r}")
    packed = _pack_env(graphs)
    nodes = params_to_nodes(params)
    rng = np.random.default_rng(seed)
    fwd = env_forward(
        nodes, packed, env, params.config, TrainConfig(), rng, tau, need_similarity=False
    )
    logp = combined_log_probs(fwd.logp_c, fwd.logp_s, prior, mode=mode)
    return float(cross_entropy(logp, packed.labels).value)


def hscic_penalty(
    invariant_reps: np.ndarray,
    variant_reps: np.ndarray,
    labels: Sequence[int],
    *,
    num_classes: int | None = None,
    ridge: float = HSCIC_RIDGE,
) -> float:
    """Non-negative conditional-dependence score of two representation sets."""
    labels = np.asarray(labels, dtype=np.int64)
    k = int(labels.max()) + 1 if num_classes is None else num_classes
    return float(
        hscic_tape(Var(np.asarray(invariant_reps)), Var(np.asarray(variant_reps)), labels, k, ridge).value
    )


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Standard adaptive-moment optimizer over a flat parameter dict."""

    def __init__(self, values: Mapping[str, np.ndarray], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {k: np.zeros_like(v) for k, v in values.items()}
        self.v = {k: np.zeros_like(v) for k, v in values.items()}

    def step(self, values: dict[str, np.ndarray], grads: Mapping[str, np.ndarray]) -> None:
        self.step_count += 1
        b1c = 1.0 - self.beta1**self.step_count
        b2c = 1.0 - self.beta2**self.step_count
        for key, grad in grads.items():
            if grad is None:
                continue
            self.m[key] = self.beta1 * self.m[key] + (1.0 - self.beta1) * grad
            self.v[key] = self.beta2 * self.v[key] + (1.0 - self.beta2) * grad * grad
            m_hat = self.m[key] / b1c
            v_hat = self.v[key] / b2c
            values[key] = values[key] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class TrainResult:
    params: ModelParams
    history: list[RiskBreakdown] = field(default_factory=list)


def _check_finite(value: float, term: str, env: str) -> None:
    if not np.isfinite(value):
        raise NonFiniteLossError(f"{term} became non-finite on environment {env!r}")


def build_step_objective(
    nodes: Mapping[str, Var],
    batches: Mapping[str, PackedBatch],
    marginals: Mapping[str, np.ndarray],
    config: ModelConfig,
    train_config: TrainConfig,
    rng: np.random.Generator,
    tau: float,
    objective: str,
) -> tuple[Var, dict[str, dict[str, float]], dict[str, float]]:
    """Assemble one optimization step over all environments.

    Returns the scalar loss node, per-env term values for logging, and
    per-env training accuracy of the invariant head.
    """
    envs = list(batches)
    need_sim = objective == "full" and not train_config.no_pns
    need_var = objective != "erm"
    forwards: dict[str, EnvForward] = {}
    for env in envs:
        forwards[env] = env_forward(
            nodes, batches[env], env, config, train_config, rng, tau,
            need_similarity=need_sim, need_variant=need_var,
        )

    terms: dict[str, dict[str, float]] = {e: {} for e in envs}
    accs: dict[str, float] = {}
    pieces: list[Var] = []

    # Contrastive term over the union of environments, split evenly so that
    # per-env breakdowns still sum to the step objective.
    contrast = None
    if objective != "erm":
        pooled_all = ad.concat0([forwards[e].pooled_c for e in envs])
        labels_all = np.concatenate([batches[e].labels for e in envs])
        contrast = supervised_contrastive(
            pooled_all, labels_all, train_config.contrastive_temperature
        )

    for env in envs:
        fwd = forwards[env]
        labels = batches[env].labels
        accs[env] = float((np.argmax(fwd.logp_c.value, axis=1) == labels).mean())

        ce = cross_entropy(fwd.logp_c, labels)
        r_inv = ce
        if contrast is not None:
            r_inv = r_inv + contrast * (1.0 / len(envs))
        terms[env]["r_inv"] = float(r_inv.value)
        _check_finite(terms[env]["r_inv"], "invariant risk", env)
        pieces.append(r_inv)

        if need_sim:
            model_probs = ad.exp(ad.take_per_row(fwd.logp_c, labels))
            marg = marginals[env][labels]
            r_ns = pns_fraction(marg, model_probs, fwd.mean_similarity)
            if fwd.clamp_fraction > 0.1:
                warnings.warn(
                    f"necessity/sufficiency denominator clamped on "
                    f"{fwd.clamp_fraction:.0%} of a batch in {env!r}",
                    stacklevel=2,
                )
            terms[env]["r_ns"] = float(r_ns.value)
            _check_finite(terms[env]["r_ns"], "necessity/sufficiency risk", env)
            pieces.append(r_ns)
        else:
            terms[env]["r_ns"] = 0.0

        if need_var:
            logp_joint = combined_log_probs(fwd.logp_c, fwd.logp_s, marginals[env])
            r_joint = cross_entropy(logp_joint, labels)
            terms[env]["r_joint"] = float(r_joint.value)
            _check_finite(terms[env]["r_joint"], "joint risk", env)
            pieces.append(r_joint)

            r_ci = hscic_tape(
                fwd.pooled_c, fwd.pooled_s, labels, config.num_classes
            )
            terms[env]["r_ci"] = float(r_ci.value)
            _check_finite(terms[env]["r_ci"], "conditional-independence penalty", env)
            if train_config.lambda_ci > 0:
                pieces.append(r_ci * train_config.lambda_ci)
        else:
            terms[env]["r_joint"] = 0.0
            terms[env]["r_ci"] = 0.0

    total = pieces[0]
    for piece in pieces[1:]:
        total = total + piece
    return total, terms, accs


def train(
    train_dataset: Dataset,
    config: TrainConfig,
    *,
    objective: str | None = None,
    log_path=None,
) -> TrainResult:
    """Optimize all parameters on the environment-tagged training data.

    ``objective`` selects the term set: ``full`` (default), ``no_pns``
    (ablation without the necessity/sufficiency risk), or ``erm`` (plain
    cross-entropy on the invariant pathway, the reference baseline).
    Deterministic for a fixed config and dataset.
    """
    if objective is None:
        objective = "no_pns" if config.no_pns else "full"
    if objective not in OBJECTIVES:
        raise InputValidationError(f"objective must be one of {OBJECTIVES}")
    envs = list(train_dataset.environments)
    if not envs:
        raise InputValidationError("training data declares no environments")

    model_config = ModelConfig(
        feature_dim=train_dataset.feature_dim,
        num_classes=train_dataset.num_classes,
        hidden_dim=config.hidden_dim,
        readout=config.readout,
        activation=config.activation,
    )
    params = init_params(model_config, envs, seed=config.seed)
    optimizer = Adam(params.values, lr=config.learning_rate)
    rng = np.random.default_rng(config.seed)

    env_graphs = {e: list(train_dataset.by_env(e)) for e in envs}
    marginals: dict[str, np.ndarray] = {}
    for e in envs:
        counts = np.zeros(train_dataset.num_classes)
        for g in env_graphs[e]:
            counts[g.label] += 1
        marginals[e] = counts / counts.sum()

    history: list[RiskBreakdown] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        for epoch in range(config.max_epochs):
            tau = config.tau_at(epoch)
            orders = {
                e: rng.permutation(len(env_graphs[e])) for e in envs
            }
            steps = max(1, min(len(env_graphs[e]) for e in envs) // config.batch_size)
            sums = {e: {"r_ns": 0.0, "r_inv": 0.0, "r_joint": 0.0, "r_ci": 0.0, "acc": 0.0} for e in envs}
            for step in range(steps):
                batches = {}
                for e in envs:
                    size = min(config.batch_size, len(env_graphs[e]))
                    idx = orders[e][step * size : (step + 1) * size]
                    if idx.size == 0:
                        idx = orders[e][:size]
                    batches[e] = pack([env_graphs[e][i] for i in idx])
                nodes = params_to_nodes(params)
                loss, terms, accs = build_step_objective(
                    nodes, batches, marginals, model_config, config, rng, tau, objective
                )
                ad.backward(loss)
                grads = {k: nodes[k].grad for k in params.values if nodes[k].grad is not None}
                optimizer.step(params.values, grads)
                for e in envs:
                    for key in ("r_ns", "r_inv", "r_joint", "r_ci"):
                        sums[e][key] += terms[e][key]
                    sums[e]["acc"] += accs[e]
            for e in envs:
                breakdown = RiskBreakdown(
                    epoch=epoch,
                    env=e,
                    r_ns=sums[e]["r_ns"] / steps,
                    r_inv=sums[e]["r_inv"] / steps,
                    r_joint=sums[e]["r_joint"] / steps,
                    r_ci=sums[e]["r_ci"] / steps,
                    lambda_ci=config.lambda_ci,
                    train_acc=sums[e]["acc"] / steps,
                )
                history.append(breakdown)
                if log_fh is not None:
                    log_fh.write(json.dumps(breakdown.record(), separators=(",", ":")) + "\n")
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(params=params, history=history)
