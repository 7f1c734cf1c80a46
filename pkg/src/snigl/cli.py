"""The ``snigl`` command: generate / train / adapt / eval / plot.

A run is driven by one declarative JSON config with four sections (data,
train, adapt, eval) plus an output directory.  Defaults form the ``desk``
profile; the ``paper`` profile raises epochs and widths to full scale.
Unknown keys are rejected.  Each command rewrites the resolved config next
to its outputs, and every artifact except ``run_meta.json`` (timestamps) is
byte-identical across reruns with the same config and seeds.

Exit codes: 2 invalid flags/config, 3 write failure, 4 missing upstream
artifact, 5 degenerate calibration.
"""

from __future__ import annotations

import argparse
import copy
import datetime
import json
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .adaptation import AdaptConfig, adapt, write_predictions
from .data import (
    Dataset,
    SplitScheme,
    generate_spurious_motif,
    load_dataset,
    save_dataset,
    split_environments,
)
from .errors import (
    CalibrationDegeneracyError,
    FormatError,
    InputValidationError,
    MissingArtifactError,
    ParameterRangeError,
    SingleClassPseudoLabelsError,
    SniglError,
)
from .model import load_checkpoint, save_checkpoint
from .training import TrainConfig, train

VARIANTS = ("full", "no_pns", "no_ensemble", "erm_baseline")

EXIT_INVALID = 2
EXIT_WRITE = 3
EXIT_MISSING = 4
EXIT_DEGENERATE = 5

TEST_BIAS = 1.0 / 3.0

DEFAULT_CONFIG: dict = {
    "version": 1,
    "out": "runs/run",
    "profile": "desk",
    "data": {
        "source": "spmotif",
        "n_train_per_env": 1500,
        "bias_levels": [0.7, 0.9],
        "feature_bias": None,
        "n_test": 900,
        "base_size_range": [6, 10],
        "seed": 0,
        "train_path": None,
        "test_path": None,
    },
    "train": {
        "lambda_ci": 0.001,
        "learning_rate": 0.001,
        "max_epochs": 60,
        "batch_size": 64,
        "k": 8,
        "tau_start": 1.0,
        "tau_end": 0.3,
        "hidden_dim": 32,
        "readout": "mean",
        "activation": "tanh",
        "contrastive_temperature": 0.5,
    },
    "adapt": {
        "learning_rate": 0.0001,
        "epochs": 100,
        "batch_size": 64,
        "pseudo_label_mode": "argmax",
        "calibration_mode": None,
        "combine_mode": "corrected",
    },
    "eval": {
        "seeds": [0, 1, 2, 3],
        "metrics": ["accuracy"],
    },
}

PROFILES: dict[str, dict] = {
    "desk": {},
    "paper": {"train": {"max_epochs": 200, "hidden_dim": 300}},
}


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------


def _overlay(base: dict, update: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in update.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise InputValidationError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and isinstance(value, Mapping):
            out[key] = _overlay(base[key], value, where)
        else:
            out[key] = value
    return out


def resolve_config(user: Mapping) -> dict:
    """Defaults -> profile overlay -> user overlay, with unknown keys rejected."""
    profile = user.get("profile", DEFAULT_CONFIG["profile"])
    if profile not in PROFILES:
        raise InputValidationError(f"unknown profile {profile!r}")
    resolved = _overlay(DEFAULT_CONFIG, PROFILES[profile])
    resolved = _overlay(resolved, user)
    if resolved["version"] != 1:
        raise InputValidationError(f"config version {resolved['version']!r} unsupported")
    if resolved["data"]["source"] not in ("spmotif", "ingest"):
        raise InputValidationError("data.source must be 'spmotif' or 'ingest'")
    if not resolved["eval"]["seeds"]:
        raise InputValidationError("eval.seeds must be non-empty")
    return resolved


def load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
    except FileNotFoundError:
        raise MissingArtifactError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise InputValidationError(f"config is not valid JSON: {exc}") from exc
    return resolve_config(user)


def _dump_json(obj, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_run_meta(out: Path, command: str) -> None:
    _dump_json(
        {"command": command, "timestamp": datetime.datetime.now(datetime.timezone.utc).isoformat()},
        out / "run_meta.json",
    )


# ---------------------------------------------------------------------------
# Data stage
# ---------------------------------------------------------------------------


def _derived_seed(base: int, stream: int) -> int:
    return int(np.random.SeedSequence((base, stream)).generate_state(1)[0])


def build_datasets(cfg: dict) -> tuple[Dataset, Dataset]:
    """Materialize (or load) the env-tagged train pool and the test pool."""
    data = cfg["data"]
    if data["source"] == "ingest":
        if not data["train_path"] or not data["test_path"]:
            raise MissingArtifactError("ingest source needs data.train_path and data.test_path")
        return load_dataset(data["train_path"]), load_dataset(data["test_path"])
    levels = list(data["bias_levels"])
    if len(levels) < 1:
        raise InputValidationError("data.bias_levels must not be empty")
    fb = data["feature_bias"]
    size_range = tuple(data["base_size_range"])
    env_sets = []
    for i, bias in enumerate(levels):
        ds = generate_spurious_motif(
            data["n_train_per_env"],
            bias=bias,
            feature_bias=fb,
            seed=_derived_seed(data["seed"], i),
            base_size_range=size_range,
            env=f"bias={bias:g}",
        )
        env_sets.append(ds)
    graphs = []
    for i, ds in enumerate(env_sets):
        for g in ds.graphs:
            graphs.append(
                type(g)(
                    num_nodes=g.num_nodes,
                    edges=g.edges,
                    node_features=g.node_features,
                    label=g.label,
                    env=g.env,
                    graph_id=f"e{i}-{g.graph_id}",
                    motif_mask=g.motif_mask,
                )
            )
    train_ds = Dataset(
        graphs=tuple(graphs),
        num_classes=env_sets[0].num_classes,
        feature_dim=env_sets[0].feature_dim,
        environments=tuple(ds.environments[0] for ds in env_sets),
        provenance=env_sets[0].provenance,
    )
    test_ds = generate_spurious_motif(
        data["n_test"],
        bias=TEST_BIAS,
        feature_bias=TEST_BIAS if fb is not None else None,
        seed=_derived_seed(data["seed"], 10_000),
        base_size_range=size_range,
        env="test",
    )
    return train_ds, test_ds


def ensure_datasets(cfg: dict, out: Path) -> tuple[Dataset, Dataset]:
    train_path = out / "data" / "train.jsonl"
    test_path = out / "data" / "test.jsonl"
    if train_path.exists() and test_path.exists():
        return load_dataset(train_path), load_dataset(test_path)
    train_ds, test_ds = build_datasets(cfg)
    train_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(train_ds, train_path)
    save_dataset(test_ds, test_path)
    return train_ds, test_ds


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    if args.dataset != "spmotif":
        raise ParameterRangeError(f"unknown dataset {args.dataset!r}")
    ds = generate_spurious_motif(
        args.n,
        bias=args.bias,
        feature_bias=args.feature_bias,
        seed=args.seed,
        base_size_range=(args.base_min, args.base_max),
        env=args.env,
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    print(
        f"wrote {len(ds)} graphs to {out} "
        f"(classes={ds.num_classes}, feature_dim={ds.feature_dim}, "
        f"mean_nodes={ds.mean_nodes():.2f}, mean_edges={ds.mean_edges():.2f})"
    )
    return 0


def _training_objective(variant: str) -> str:
    return {"full": "full", "no_ensemble": "full", "no_pns": "no_pns", "erm_baseline": "erm"}[variant]


def _checkpoint_variant(variant: str) -> str:
    """no_ensemble is an evaluation-time ablation of the full training."""
    return "full" if variant == "no_ensemble" else variant


def _seed_dir(out: Path, seed: int, variant: str) -> Path:
    return out / f"seed_{seed}" / variant


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg["out"])
    _dump_json(cfg, out / "effective_config.json")
    _write_run_meta(out, "train")
    train_ds, _ = ensure_datasets(cfg, out)
    ckpt_variant = _checkpoint_variant(args.variant)
    objective = _training_objective(args.variant)
    for seed in cfg["eval"]["seeds"]:
        tc = TrainConfig(seed=seed, **cfg["train"])
        run_dir = _seed_dir(out, seed, ckpt_variant)
        run_dir.mkdir(parents=True, exist_ok=True)
        result = train(
            train_ds, tc, objective=objective, log_path=run_dir / "train_log.jsonl"
        )
        save_checkpoint(result.params, run_dir / "checkpoint.bin")
        last = [h for h in result.history if h.epoch == tc.max_epochs - 1]
        accs = ", ".join(f"{h.env}={h.train_acc:.3f}" for h in last)
        print(f"[seed {seed}] trained {ckpt_variant} ({objective}); final train acc: {accs}")
    return 0


def cmd_adapt(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg["out"])
    _dump_json(cfg, out / "effective_config.json")
    _write_run_meta(out, "adapt")
    _, test_ds = ensure_datasets(cfg, out)
    ensemble = args.variant in ("full", "no_pns")
    for seed in cfg["eval"]["seeds"]:
        ckpt_path = _seed_dir(out, seed, _checkpoint_variant(args.variant)) / "checkpoint.bin"
        if not ckpt_path.exists():
            raise MissingArtifactError(
                f"checkpoint {ckpt_path} not found; run `snigl train` for this variant first"
            )
        params = load_checkpoint(ckpt_path)
        ac = AdaptConfig(seed=seed, no_ensemble=not ensemble, **cfg["adapt"])
        result = adapt(list(test_ds.graphs), params, ac)
        var_dir = _seed_dir(out, seed, args.variant)
        var_dir.mkdir(parents=True, exist_ok=True)
        write_predictions(result, test_ds.graphs, var_dir / "predictions.jsonl")
        _dump_json([float(p) for p in result.prior], var_dir / "prior.json")
        if result.calibrated is not None:
            result.calibrated.stats.save(var_dir / "calibration.txt")
        print(f"[seed {seed}] adapted {args.variant} on {len(test_ds)} test graphs")
    return 0


@dataclass
class MetricsReport:
    variant: str
    seeds: list[int]
    per_seed_accuracy: list[float]
    mean_accuracy: float
    std_accuracy: float
    per_seed_auc: list[float] | None = None
    mean_auc: float | None = None
    std_auc: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def roc_auc_binary(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based area under the ROC curve (ties get average rank)."""
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty_like(order, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(sorted_scores):
        j = i
        while j + 1 < len(sorted_scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise InputValidationError("ROC-AUC needs both classes present")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _load_predictions(path: Path) -> tuple[np.ndarray, np.ndarray]:
    if not path.exists():
        raise MissingArtifactError(
            f"predictions {path} not found; run `snigl adapt` for this variant first"
        )
    probs, labels = [], []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        try:
            rec = json.loads(line)
            probs.append(rec.get("combined", rec["invariant"]))
            labels.append(rec["true_label"])
        except (json.JSONDecodeError, KeyError) as exc:
            raise FormatError(f"malformed prediction record: {exc}", lineno) from exc
    return np.array(probs), np.array(labels, dtype=np.int64)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    out = Path(cfg["out"])
    _dump_json(cfg, out / "effective_config.json")
    _write_run_meta(out, "eval")
    seeds = list(cfg["eval"]["seeds"])
    per_acc, per_auc = [], []
    want_auc = "auc" in cfg["eval"]["metrics"]
    for seed in seeds:
        probs, labels = _load_predictions(_seed_dir(out, seed, args.variant) / "predictions.jsonl")
        per_acc.append(float((np.argmax(probs, axis=1) == labels).mean()))
        if want_auc and probs.shape[1] == 2:
            per_auc.append(roc_auc_binary(probs[:, 1], labels))
    report = MetricsReport(
        variant=args.variant,
        seeds=seeds,
        per_seed_accuracy=per_acc,
        mean_accuracy=float(np.mean(per_acc)),
        std_accuracy=float(np.std(per_acc)),
        per_seed_auc=per_auc or None,
        mean_auc=float(np.mean(per_auc)) if per_auc else None,
        std_auc=float(np.std(per_auc)) if per_auc else None,
    )
    report_path = out / "eval" / f"report_{args.variant}.json"
    _dump_json(report.to_dict(), report_path)
    print(
        f"{args.variant}: accuracy {report.mean_accuracy:.4f} +- {report.std_accuracy:.4f} "
        f"over seeds {seeds} -> {report_path}"
    )
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(args.run_dir)
    plots = out / "plots"
    plots.mkdir(parents=True, exist_ok=True)

    # Loss curves from the first available training log.
    log_path = None
    for variant in VARIANTS:
        for seed_dir in sorted(out.glob("seed_*")):
            candidate = seed_dir / variant / "train_log.jsonl"
            if candidate.exists():
                log_path = candidate
                break
        if log_path:
            break
    if log_path is None:
        raise MissingArtifactError(f"no train_log.jsonl under {out}")
    records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
    if not records:
        raise MissingArtifactError(f"training log {log_path} is empty")
    envs = sorted({r["env"] for r in records})
    fig, ax = plt.subplots(figsize=(7, 4))
    for env in envs:
        rows = [r for r in records if r["env"] == env]
        ax.plot([r["epoch"] for r in rows], [r["total"] for r in rows], label=f"total ({env})")
    ax.set_xlabel("epoch")
    ax.set_ylabel("risk")
    ax.legend()
    ax.set_title("training risk")
    fig.tight_layout()
    fig.savefig(plots / "loss_curve.png", dpi=120)
    plt.close(fig)
    with open(plots / "loss_curve.csv", "w", encoding="utf-8") as fh:
        fh.write("epoch,env,r_ns,r_inv,r_joint,r_ci,total,train_acc\n")
        for r in records:
            fh.write(
                f'{r["epoch"]},{r["env"]},{r["r_ns"]!r},{r["r_inv"]!r},'
                f'{r["r_joint"]!r},{r["r_ci"]!r},{r["total"]!r},{r["train_acc"]!r}\n'
            )

    # Ablation bars from whatever eval reports exist.
    reports = {}
    for rp in sorted((out / "eval").glob("report_*.json")) if (out / "eval").exists() else []:
        rec = json.loads(rp.read_text())
        reports[rec["variant"]] = rec
    if not reports:
        raise MissingArtifactError(f"no eval reports under {out}/eval")
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(reports)
    means = [reports[n]["mean_accuracy"] for n in names]
    stds = [reports[n]["std_accuracy"] for n in names]
    ax.bar(range(len(names)), means, yerr=stds, capsize=4)
    ax.set_xticks(range(len(names)), names, rotation=20)
    ax.set_ylabel("test accuracy")
    ax.set_title("variants")
    fig.tight_layout()
    fig.savefig(plots / "ablation_bars.png", dpi=120)
    plt.close(fig)
    _dump_json(reports, plots / "ablation_bars.json")

    # Mask overlays on a few test graphs, from the checkpoint next to the log.
    ckpt_path = log_path.parent / "checkpoint.bin"
    test_path = out / "data" / "test.jsonl"
    if not ckpt_path.exists() or not test_path.exists():
        raise MissingArtifactError("mask overlay needs data/test.jsonl and a checkpoint")
    import networkx as nx

    from .model import edge_mask

    params = load_checkpoint(ckpt_path)
    test_ds = load_dataset(test_path)
    sample = list(test_ds.graphs[:6])
    fig, axes = plt.subplots(2, 3, figsize=(12, 7))
    side_records = []
    for ax, g in zip(axes.reshape(-1), sample):
        mask = edge_mask(g, params, kind="invariant")
        graph = nx.Graph()
        graph.add_nodes_from(range(g.num_nodes))
        graph.add_edges_from(g.edges)
        pos = nx.spring_layout(graph, seed=0)
        motif = set(g.motif_mask or ())
        widths = [0.5 + 3.0 * p for p in mask.probs]
        colors = ["tab:red" if e in motif else "tab:gray" for e in mask.edges]
        nx.draw_networkx_edges(graph, pos, edgelist=list(mask.edges), width=widths, edge_color=colors, ax=ax)
        nx.draw_networkx_nodes(graph, pos, node_size=40, node_color="black", ax=ax)
        ax.set_title(f"{g.graph_id} (label {g.label})", fontsize=9)
        ax.axis("off")
        side_records.append(
            {
                "graph_id": g.graph_id,
                "edges": [[int(u), int(v)] for u, v in mask.edges],
                "probs": [float(p) for p in mask.probs],
                "motif_mask": [[int(u), int(v)] for u, v in (g.motif_mask or ())],
            }
        )
    fig.suptitle("invariant mask probabilities (red = planted motif)")
    fig.tight_layout()
    fig.savefig(plots / "mask_overlay.png", dpi=120)
    plt.close(fig)
    _dump_json(side_records, plots / "mask_overlay.json")
    print(f"wrote plots to {plots}")
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="snigl",
        description="Invariant-subgraph learning with test-domain adaptation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a biased-motif dataset")
    g.add_argument("--dataset", default="spmotif")
    g.add_argument("--bias", type=float, required=True)
    g.add_argument("--feature-bias", type=float, default=None, dest="feature_bias")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--base-min", type=int, default=6)
    g.add_argument("--base-max", type=int, default=10)
    g.add_argument("--env", default="train")
    g.set_defaults(func=cmd_generate)

    for name, fn in (("train", cmd_train), ("adapt", cmd_adapt), ("eval", cmd_eval)):
        p = sub.add_parser(name, help=f"{name} per the run config")
        p.add_argument("config", help="path to the run config JSON")
        p.add_argument("--variant", choices=VARIANTS, default="full")
        p.set_defaults(func=fn)

    p = sub.add_parser("plot", help="emit loss curves, ablation bars, mask overlays")
    p.add_argument("run_dir")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CalibrationDegeneracyError, SingleClassPseudoLabelsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except MissingArtifactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ParameterRangeError, InputValidationError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_WRITE
    except SniglError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
