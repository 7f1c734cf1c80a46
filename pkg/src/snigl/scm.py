"""Exact enumeration oracles over finite structural causal models.

Everything in this module is brute force on purpose: probabilities of
necessity-and-sufficiency are computed by enumerating every exogenous
assignment and replaying the mechanisms under interventions, and posterior
queries are computed by summing cells of an explicit joint table.  These
exact values are the reference against which the observational bounds and
the calibration algebra elsewhere in the package are verified.

Conventions
-----------
* An SCM is a set of named exogenous variables with finite distributions,
  plus deterministically mechanized endogenous variables listed in
  topological order.  Mechanisms are truth tables indexed by parent values.
* ``exact_pns(scm, (C, c), (Y, y))`` enumerates the two-event definition

      P(Y_{do(C=c)} = y,  C != c, Y != y)  +  P(Y_{do(C!=c)} != y,  C = c, Y = y)

  which requires the cause to be two-valued so that ``do(C != c)`` is a
  single intervention.
* A :class:`JointTable` is a dense array over a tuple of named finite
  variables; conditioning, marginalization, and pseudo-label extension are
  plain tensor algebra on it.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    ExogeneityError,
    FormatError,
    InputValidationError,
    IntractableEnumerationError,
    MissingPredictorError,
    NonBinaryCauseError,
    VersionMismatchError,
    ZeroProbabilityEvidenceError,
)

PROB_SUM_TOL = 1e-12
EVIDENCE_FLOOR = 1e-12
DEFAULT_STATE_CAP = 2**22

SCM_FORMAT_HEADER = "snigl-scm v1"
JOINT_FORMAT_HEADER = "snigl-joint v1"


# ---------------------------------------------------------------------------
# Structural causal models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Mechanism:
    """Deterministic truth table: ``value = table[parent values...]``."""

    parents: tuple[str, ...]
    table: np.ndarray  # integer array, one axis per parent

    def __post_init__(self):
        table = np.asarray(self.table, dtype=np.int64)
        object.__setattr__(self, "table", table)
        if table.ndim != len(self.parents):
            raise InputValidationError(
                f"mechanism table has {table.ndim} axes for {len(self.parents)} parents"
            )


@dataclass(frozen=True)
class DiscreteSCM:
    """A finite SCM: exogenous distributions plus ordered mechanisms.

    ``mechanisms`` must be given in topological order; each parent of a
    mechanism must be an exogenous variable or an earlier endogenous one.
    """

    exogenous: Mapping[str, np.ndarray]
    mechanisms: Mapping[str, Mechanism]
    cardinalities: Mapping[str, int]

    def __post_init__(self):
        exo = {name: np.asarray(p, dtype=np.float64) for name, p in self.exogenous.items()}
        object.__setattr__(self, "exogenous", exo)
        seen: set[str] = set()
        for name, probs in exo.items():
            if name in self.mechanisms:
                raise InputValidationError(f"variable {name!r} is both exogenous and mechanized")
            if probs.ndim != 1 or probs.size < 1:
                raise InputValidationError(f"distribution of {name!r} must be a 1-d vector")
            if np.any(probs < 0) or abs(float(probs.sum()) - 1.0) > PROB_SUM_TOL:
                raise InputValidationError(f"distribution of {name!r} must sum to 1")
            if self.cardinalities.get(name) != probs.size:
                raise InputValidationError(f"cardinality of {name!r} disagrees with its distribution")
            seen.add(name)
        for name, mech in self.mechanisms.items():
            card = self.cardinalities.get(name)
            if card is None:
                raise InputValidationError(f"no cardinality declared for {name!r}")
            for axis, parent in enumerate(mech.parents):
                if parent not in seen:
                    raise InputValidationError(
                        f"mechanism {name!r} uses {parent!r} before it is defined"
                    )
                if mech.table.shape[axis] != self.cardinalities[parent]:
                    raise InputValidationError(
                        f"mechanism {name!r}: axis {axis} does not match cardinality of {parent!r}"
                    )
            if mech.table.size and (mech.table.min() < 0 or mech.table.max() >= card):
                raise InputValidationError(f"mechanism {name!r} emits values outside its domain")
            seen.add(name)
        extra = set(self.cardinalities) - seen
        if extra:
            raise InputValidationError(f"cardinalities declared for unknown variables {sorted(extra)}")

    # -- structure ---------------------------------------------------------

    def variables(self) -> tuple[str, ...]:
        return tuple(self.exogenous) + tuple(self.mechanisms)

    def is_exogenous(self, name: str) -> bool:
        return name in self.exogenous

    def parents_of(self, name: str) -> tuple[str, ...]:
        if name in self.exogenous:
            return ()
        return self.mechanisms[name].parents

    def ancestors(self, name: str, *, avoiding: str | None = None) -> frozenset[str]:
        """Proper ancestors of ``name``.

        With ``avoiding`` set, ancestry is traced only along paths that do
        not pass through that variable (the avoided variable itself is never
        included); this is the backdoor-style ancestry used to check that a
        cause is exogenous relative to an effect.
        """
        out: set[str] = set()
        stack = [p for p in self.parents_of(name) if p != avoiding]
        while stack:
            v = stack.pop()
            if v not in out:
                out.add(v)
                stack.extend(p for p in self.parents_of(v) if p != avoiding)
        return frozenset(out)

    def exogenous_state_count(self) -> int:
        return math.prod(p.size for p in self.exogenous.values())


def _require_variable(scm: DiscreteSCM, name: str) -> None:
    if name not in scm.exogenous and name not in scm.mechanisms:
        raise InputValidationError(f"unknown variable {name!r}")


def _exogenous_grid(scm: DiscreteSCM) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """All exogenous assignments as parallel value arrays plus their weights."""
    names = list(scm.exogenous)
    sizes = [scm.exogenous[n].size for n in names]
    total = math.prod(sizes)
    values: dict[str, np.ndarray] = {}
    weights = np.ones(total, dtype=np.float64)
    rep_after = total
    for name, size in zip(names, sizes):
        rep_after //= size
        rep_before = total // (size * rep_after)
        col = np.tile(np.repeat(np.arange(size), rep_after), rep_before)
        values[name] = col
        weights = weights * scm.exogenous[name][col]
    return values, weights


def evaluate_mechanisms(
    scm: DiscreteSCM,
    exogenous_values: Mapping[str, np.ndarray],
    do: Mapping[str, int] | None = None,
) -> dict[str, np.ndarray]:
    """Replay all mechanisms over vectorized exogenous assignments.

    ``do`` overrides variables (exogenous or endogenous) with a fixed value,
    severing their usual determination; downstream mechanisms see the forced
    value, which is exactly graph mutilation.
    """
    do = dict(do or {})
    some = next(iter(exogenous_values.values()))
    n = int(np.asarray(some).size)
    values: dict[str, np.ndarray] = {}
    for name in scm.exogenous:
        if name in do:
            values[name] = np.full(n, do[name], dtype=np.int64)
        else:
            values[name] = np.asarray(exogenous_values[name], dtype=np.int64)
    for name, mech in scm.mechanisms.items():
        if name in do:
            values[name] = np.full(n, do[name], dtype=np.int64)
        elif mech.parents:
            values[name] = mech.table[tuple(values[p] for p in mech.parents)]
        else:
            values[name] = np.full(n, int(mech.table[()]), dtype=np.int64)
    return values


def exact_pns(
    scm: DiscreteSCM,
    cause: tuple[str, int],
    effect: tuple[str, int],
    *,
    max_states: int = DEFAULT_STATE_CAP,
) -> float:
    """Exact probability that ``cause`` is a necessary and sufficient cause
    of ``effect``, by counterfactual enumeration.

    Sums the two terms of the two-event definition directly: the sufficiency
    term over worlds where neither cause nor effect occurred, and the
    necessity term over worlds where both did.
    """
    c_name, c_val = cause
    y_name, y_val = effect
    _require_variable(scm, c_name)
    _require_variable(scm, y_name)
    if scm.cardinalities[c_name] != 2:
        raise NonBinaryCauseError(
            f"cause {c_name!r} has cardinality {scm.cardinalities[c_name]}; "
            "the complement intervention is only defined for two-valued causes"
        )
    if c_val not in (0, 1):
        raise InputValidationError(f"cause value {c_val} outside binary domain")
    # Backdoor check: an ancestor of the cause that also reaches the effect
    # without passing through the cause is a confounder.
    common = scm.ancestors(c_name) & scm.ancestors(y_name, avoiding=c_name)
    if common:
        raise ExogeneityError(
            f"{c_name!r} and {y_name!r} share ancestors {sorted(common)}"
        )
    if y_name in scm.ancestors(c_name):
        raise ExogeneityError(f"{y_name!r} is an ancestor of the cause {c_name!r}")
    if scm.exogenous_state_count() > max_states:
        raise IntractableEnumerationError(
            f"{scm.exogenous_state_count()} exogenous states exceed cap {max_states}"
        )

    exo_values, weights = _exogenous_grid(scm)
    factual = evaluate_mechanisms(scm, exo_values)
    do_c = evaluate_mechanisms(scm, exo_values, do={c_name: c_val})
    do_not_c = evaluate_mechanisms(scm, exo_values, do={c_name: 1 - c_val})

    sufficiency = (
        (factual[c_name] != c_val)
        & (factual[y_name] != y_val)
        & (do_c[y_name] == y_val)
    )
    necessity = (
        (factual[c_name] == c_val)
        & (factual[y_name] == y_val)
        & (do_not_c[y_name] != y_val)
    )
    return float(weights[sufficiency].sum() + weights[necessity].sum())


def interventional_distribution(
    scm: DiscreteSCM,
    do: Mapping[str, int],
    target: str,
    *,
    max_states: int = DEFAULT_STATE_CAP,
) -> np.ndarray:
    """``P(target | do(...))`` by enumeration of the mutilated model."""
    _require_variable(scm, target)
    if scm.exogenous_state_count() > max_states:
        raise IntractableEnumerationError(
            f"{scm.exogenous_state_count()} exogenous states exceed cap {max_states}"
        )
    exo_values, weights = _exogenous_grid(scm)
    values = evaluate_mechanisms(scm, exo_values, do=do)
    card = scm.cardinalities[target]
    out = np.zeros(card, dtype=np.float64)
    np.add.at(out, values[target], weights)
    return out


def enumerate_joint(
    scm: DiscreteSCM,
    variables: Sequence[str],
    *,
    max_states: int = DEFAULT_STATE_CAP,
) -> "JointTable":
    """Exact observational joint over ``variables``."""
    for name in variables:
        _require_variable(scm, name)
    if scm.exogenous_state_count() > max_states:
        raise IntractableEnumerationError(
            f"{scm.exogenous_state_count()} exogenous states exceed cap {max_states}"
        )
    exo_values, weights = _exogenous_grid(scm)
    values = evaluate_mechanisms(scm, exo_values)
    cards = tuple(scm.cardinalities[v] for v in variables)
    probs = np.zeros(cards, dtype=np.float64)
    flat = np.ravel_multi_index(tuple(values[v] for v in variables), cards)
    np.add.at(probs.reshape(-1), flat, weights)
    return JointTable(tuple(variables), cards, probs)


# ---------------------------------------------------------------------------
# Joint tables
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class JointTable:
    """Dense joint distribution over named finite variables."""

    variables: tuple[str, ...]
    cardinalities: tuple[int, ...]
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "cardinalities", tuple(int(c) for c in self.cardinalities))
        if len(self.variables) != len(set(self.variables)):
            raise InputValidationError("duplicate variable names in joint")
        if probs.shape != self.cardinalities:
            raise InputValidationError(
                f"probability array shape {probs.shape} != cardinalities {self.cardinalities}"
            )
        if np.any(probs < -PROB_SUM_TOL):
            raise InputValidationError("joint table has negative cells")
        if abs(float(probs.sum()) - 1.0) > PROB_SUM_TOL:
            raise InputValidationError(f"joint table sums to {probs.sum()!r}, not 1")

    def axis_of(self, name: str) -> int:
        try:
            return self.variables.index(name)
        except ValueError:
            raise InputValidationError(f"unknown variable {name!r}") from None

    def marginal(self, names: Sequence[str]) -> "JointTable":
        keep = [self.axis_of(n) for n in names]
        drop = tuple(i for i in range(len(self.variables)) if i not in keep)
        probs = self.probs.sum(axis=drop) if drop else self.probs
        probs = np.moveaxis(probs, [sorted(keep).index(k) for k in keep], range(len(keep)))
        return JointTable(tuple(names), tuple(self.cardinalities[i] for i in keep), probs)


def exact_posterior(
    joint: JointTable,
    target: str,
    evidence: Mapping[str, int],
) -> np.ndarray:
    """``P(target | evidence)`` by cell summation; a plain simplex vector."""
    t_axis = joint.axis_of(target)
    if target in evidence:
        raise InputValidationError("target cannot appear in the evidence")
    index: list[object] = [slice(None)] * len(joint.variables)
    for name, val in evidence.items():
        axis = joint.axis_of(name)
        if not 0 <= int(val) < joint.cardinalities[axis]:
            raise InputValidationError(f"evidence value {val} outside domain of {name!r}")
        index[axis] = int(val)
    sub = joint.probs[tuple(index)]
    remaining = [v for i, v in enumerate(joint.variables) if isinstance(index[i], slice)]
    sub_target_axis = remaining.index(target)
    other_axes = tuple(i for i in range(sub.ndim) if i != sub_target_axis)
    vec = sub.sum(axis=other_axes) if other_axes else sub
    mass = float(vec.sum())
    if mass < EVIDENCE_FLOOR:
        raise ZeroProbabilityEvidenceError(
            f"evidence {dict(evidence)} has probability {mass:.3e}"
        )
    return vec / mass


def simulate_pseudo_labels(
    joint: JointTable,
    predictor: Mapping[int, Sequence[float]],
    mode: str = "sample",
    *,
    given: str = "C",
    pseudo_name: str = "Yhat",
) -> JointTable:
    """Extend a joint with a pseudo-label drawn from ``predictor[c]``.

    The new variable depends on the rest of the joint only through ``given``:
    ``P(pseudo | everything) = predictor[c]`` in ``sample`` mode, or a point
    mass on ``argmax predictor[c]`` (lowest index wins ties) in ``argmax``
    mode.  Conditional independence from all other variables holds by
    construction.
    """
    if mode not in ("sample", "argmax"):
        raise InputValidationError(f"unknown pseudo-label mode {mode!r}")
    axis = joint.axis_of(given)
    if pseudo_name in joint.variables:
        raise InputValidationError(f"variable {pseudo_name!r} already present")
    support_mask = joint.marginal([given]).probs > 0
    card_given = joint.cardinalities[axis]
    k = None
    rows = np.zeros((card_given, 0), dtype=np.float64)
    for c in range(card_given):
        if not support_mask[c]:
            continue
        if c not in predictor:
            raise MissingPredictorError(f"predictor has no entry for {given}={c}")
        row = np.asarray(predictor[c], dtype=np.float64)
        if k is None:
            k = row.size
            rows = np.zeros((card_given, k), dtype=np.float64)
        elif row.size != k:
            raise InputValidationError("predictor rows have inconsistent lengths")
        if np.any(row < 0) or abs(float(row.sum()) - 1.0) > 1e-9:
            raise InputValidationError(f"predictor row for {given}={c} is not a distribution")
        if mode == "argmax":
            hard = np.zeros(k)
            hard[int(np.argmax(row))] = 1.0
            row = hard
        rows[c] = row
    if k is None:
        raise InputValidationError(f"{given!r} has empty support")
    shape = [1] * (len(joint.variables) + 1)
    shape[axis] = card_given
    shape[-1] = k
    extended = joint.probs[..., None] * rows.reshape(shape)
    return JointTable(
        joint.variables + (pseudo_name,),
        joint.cardinalities + (k,),
        extended,
    )


def joint_from_class_conditionals(
    p_y: Sequence[float],
    p_c_given_y: np.ndarray,
    p_s_given_y: np.ndarray,
) -> JointTable:
    """Build a joint over (Y, C, S) in which C and S are independent given Y.

    ``p_c_given_y[y]`` and ``p_s_given_y[y]`` are the class-conditional
    distributions; the result is the factorization P(y) P(c|y) P(s|y).
    """
    p_y = np.asarray(p_y, dtype=np.float64)
    p_c = np.asarray(p_c_given_y, dtype=np.float64)
    p_s = np.asarray(p_s_given_y, dtype=np.float64)
    if p_c.shape[0] != p_y.size or p_s.shape[0] != p_y.size:
        raise InputValidationError("class-conditional tables must have one row per class")
    probs = p_y[:, None, None] * p_c[:, :, None] * p_s[:, None, :]
    return JointTable(("Y", "C", "S"), probs.shape, probs)


# ---------------------------------------------------------------------------
# Randomized model families for property suites
# ---------------------------------------------------------------------------


def random_scm(
    rng: np.random.Generator,
    *,
    max_extra_exogenous: int = 3,
    allow_intermediate: bool = True,
) -> tuple[DiscreteSCM, tuple[str, int], tuple[str, int]]:
    """Draw a random SCM in which the cause is exogenous relative to the effect.

    The cause ``C`` is a two-valued function of its private exogenous noise,
    and the effect ``Y`` (optionally through an intermediate ``W``) depends on
    ``C`` and on separate noise variables, so no ancestor is shared.  Draws
    are rejected until ``P(C=1)`` lies in (0.02, 0.98) to keep conditional
    oracles well defined.
    """
    for _ in range(200):
        exogenous: dict[str, np.ndarray] = {}
        cards: dict[str, int] = {}
        uc_card = int(rng.integers(2, 4))
        exogenous["Uc"] = rng.dirichlet(np.ones(uc_card) * 2.0)
        cards["Uc"] = uc_card
        n_rest = int(rng.integers(1, max_extra_exogenous + 1))
        rest_names = []
        for i in range(n_rest):
            card = int(rng.integers(2, 4))
            name = f"U{i}"
            exogenous[name] = rng.dirichlet(np.ones(card) * 2.0)
            cards[name] = card
            rest_names.append(name)

        mechanisms: dict[str, Mechanism] = {}
        c_table = rng.integers(0, 2, size=uc_card)
        if c_table.min() == c_table.max():  # force both values reachable
            c_table[rng.integers(uc_card)] = 1 - c_table[0]
        mechanisms["C"] = Mechanism(("Uc",), c_table)
        cards["C"] = 2

        y_parents: list[str] = ["C"]
        if allow_intermediate and rng.random() < 0.5:
            w_card = int(rng.integers(2, 4))
            w_parents = ("C", rest_names[0])
            w_shape = tuple(cards[p] for p in w_parents)
            mechanisms["W"] = Mechanism(w_parents, rng.integers(0, w_card, size=w_shape))
            cards["W"] = w_card
            y_parents.append("W")
        for name in rest_names[1:] or rest_names[:1]:
            if name not in y_parents:
                y_parents.append(name)
        y_card = 2
        y_shape = tuple(cards[p] for p in y_parents)
        mechanisms["Y"] = Mechanism(tuple(y_parents), rng.integers(0, y_card, size=y_shape))
        cards["Y"] = y_card

        scm = DiscreteSCM(exogenous, mechanisms, cards)
        marg_c = enumerate_joint(scm, ["C"]).probs
        if 0.02 < marg_c[1] < 0.98:
            return scm, ("C", 1), ("Y", 1)
    raise RuntimeError("failed to draw a non-degenerate SCM in 200 attempts")


def or_gate_scm(p_c: float = 0.5, p_u: float = 0.2) -> DiscreteSCM:
    """``Y := C or U`` with independent Bernoulli inputs.

    This model attains the observational lower bound exactly, which makes it
    the standard tightness witness in the property suites.
    """
    return DiscreteSCM(
        exogenous={"C": np.array([1 - p_c, p_c]), "U": np.array([1 - p_u, p_u])},
        mechanisms={"Y": Mechanism(("C", "U"), np.array([[0, 1], [1, 1]]))},
        cardinalities={"C": 2, "U": 2, "Y": 2},
    )


def xor_noise_scm(p_c: float = 0.5, p_u: float = 0.1) -> DiscreteSCM:
    """``Y := C xor U``: the exact value exceeds the observational bound."""
    return DiscreteSCM(
        exogenous={"C": np.array([1 - p_c, p_c]), "U": np.array([1 - p_u, p_u])},
        mechanisms={"Y": Mechanism(("C", "U"), np.array([[0, 1], [1, 0]]))},
        cardinalities={"C": 2, "U": 2, "Y": 2},
    )


# ---------------------------------------------------------------------------
# Declarative text format (version 1)
# ---------------------------------------------------------------------------


def save_scm(scm: DiscreteSCM, path) -> None:
    lines = [SCM_FORMAT_HEADER]
    for name, probs in scm.exogenous.items():
        body = " ".join(repr(float(p)) for p in probs)
        lines.append(f"exo {name} {probs.size} {body}")
    for name, mech in scm.mechanisms.items():
        parents = ",".join(mech.parents) if mech.parents else "-"
        body = " ".join(str(int(v)) for v in mech.table.reshape(-1))
        lines.append(f"mech {name} {scm.cardinalities[name]} {parents} {body}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_scm(path) -> DiscreteSCM:
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise FormatError("empty file", 1)
    if raw[0].strip() != SCM_FORMAT_HEADER:
        raise VersionMismatchError(f"expected {SCM_FORMAT_HEADER!r}, found {raw[0]!r}", 1)
    exogenous: dict[str, np.ndarray] = {}
    mechanisms: dict[str, Mechanism] = {}
    cards: dict[str, int] = {}
    for lineno, line in enumerate(raw[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        try:
            kind = fields[0]
            if kind == "exo":
                name, card = fields[1], int(fields[2])
                probs = np.array([float(x) for x in fields[3:]])
                if probs.size != card:
                    raise FormatError(f"expected {card} probabilities, found {probs.size}", lineno)
                exogenous[name] = probs
                cards[name] = card
            elif kind == "mech":
                name, card = fields[1], int(fields[2])
                parents = tuple(fields[3].split(",")) if fields[3] != "-" else ()
                values = np.array([int(x) for x in fields[4:]], dtype=np.int64)
                shape = tuple(cards[p] for p in parents)
                if values.size != math.prod(shape):
                    raise FormatError(
                        f"mechanism {name!r} expects {math.prod(shape)} entries, found {values.size}",
                        lineno,
                    )
                mechanisms[name] = Mechanism(parents, values.reshape(shape))
                cards[name] = card
            else:
                raise FormatError(f"unknown record kind {kind!r}", lineno)
        except FormatError:
            raise
        except (IndexError, KeyError, ValueError) as exc:
            raise FormatError(f"malformed record: {exc}", lineno) from exc
    return DiscreteSCM(exogenous, mechanisms, cards)


def save_joint(joint: JointTable, path) -> None:
    lines = [
        JOINT_FORMAT_HEADER,
        "vars " + ",".join(joint.variables),
        "cards " + ",".join(str(c) for c in joint.cardinalities),
        "probs " + " ".join(repr(float(p)) for p in joint.probs.reshape(-1)),
    ]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_joint(path) -> JointTable:
    with open(path, encoding="utf-8") as fh:
        raw = fh.read().splitlines()
    if not raw:
        raise FormatError("empty file", 1)
    if raw[0].strip() != JOINT_FORMAT_HEADER:
        raise VersionMismatchError(f"expected {JOINT_FORMAT_HEADER!r}, found {raw[0]!r}", 1)
    fields: dict[str, str] = {}
    for lineno, line in enumerate(raw[1:], start=2):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, rest = line.partition(" ")
        if key not in ("vars", "cards", "probs") or not rest:
            raise FormatError(f"unknown or incomplete record {key!r}", lineno)
        fields[key] = rest
    try:
        variables = tuple(fields["vars"].split(","))
        cards = tuple(int(c) for c in fields["cards"].split(","))
        probs = np.array([float(p) for p in fields["probs"].split()]).reshape(cards)
    except KeyError as exc:
        raise FormatError(f"missing record {exc.args[0]!r}") from exc
    except ValueError as exc:
        raise FormatError(f"malformed joint table: {exc}") from exc
    return JointTable(variables, cards, probs)
