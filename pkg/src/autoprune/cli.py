"""Command-line front end: pretrain, search, prune, report, describe.

A run lives in one output directory with a subdirectory per phase
(baseline/, search/, pruned/, report/).  Settings come from an INI file
plus command-line overrides; unknown keys are hard errors so typos never
silently fall back to defaults.

Exit codes: 0 success, 1 failed run (divergence, violated invariant),
2 bad arguments or missing files.
"""

from __future__ import annotations

import argparse
import configparser
import json
import sys
import time
from pathlib import Path

from . import __version__
from .data import DataFormatError, load_cifar10, load_mnist, split_validation, substream
from .model import build_model, evaluate, exact_model_flops, layer_flops
from .pruner import (
    PruningPlan,
    export_pruned,
    finalize_plan,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train_supervised,
)
from .report import format_table, read_csv, summary_rows, svg_line_plot, write_csv
from .search import SearchConfig, SearchDiverged, run_search


class ConfigError(ValueError):
    """Bad configuration file or option value."""


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


SCHEMA = {
    "run": {
        "model": str,
        "dataset": str,
        "data_dir": str,
        "out_dir": str,
        "seed": int,
        "validation_fraction": float,
    },
    "pretrain": {
        "epochs": int,
        "batch_size": int,
        "lr_max": float,
        "lr_min": float,
        "augment": _bool,
    },
    "search": {
        "alpha": float,
        "beta": float,
        "epochs": int,
        "batch_size": int,
        "lr_w_max": float,
        "lr_w_min": float,
        "lr_r_max": float,
        "lr_r_min": float,
        "cosine_period_epochs": float,
        "ranking_interval": int,
        "inner_steps_per_outer": int,
        "cost_in_inner_loss": _bool,
        "log_interval": int,
        "convergence_tol": float,
        "probe_size": int,
    },
    "finetune": {
        "epochs": int,
        "batch_size": int,
        "lr_max": float,
        "lr_min": float,
    },
}

DEFAULTS = {
    "run": {
        "model": "cnn-small",
        "dataset": "mnist",
        "data_dir": "",
        "out_dir": "runs/default",
        "seed": 0,
        "validation_fraction": 0.1,
    },
    "pretrain": {"epochs": 3, "batch_size": 64, "lr_max": 0.1, "lr_min": 0.001, "augment": False},
    "search": {
        "alpha": 0.5,
        "beta": 0.3,
        "epochs": 6,
        "batch_size": 32,
        "lr_w_max": 0.1,
        "lr_w_min": 0.001,
        "lr_r_max": 0.1,
        "lr_r_min": 0.0001,
        "cosine_period_epochs": 0.0,
        "ranking_interval": 800,
        "inner_steps_per_outer": 1,
        "cost_in_inner_loss": True,
        "log_interval": 50,
        "convergence_tol": 1e-4,
        "probe_size": 1024,
    },
    "finetune": {"epochs": 10, "batch_size": 64, "lr_max": 0.01, "lr_min": 0.0001},
}


def load_config(path: str | None) -> dict:
    """Read an INI file against the schema; start from defaults."""
    cfg = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is None:
        return cfg
    parser = configparser.ConfigParser()
    read = parser.read(path)
    if not read:
        raise ConfigError(f"cannot read config file {path}")
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ConfigError(f"unknown config key {key!r} in section [{section}]")
            conv = SCHEMA[section][key]
            try:
                cfg[section][key] = conv(raw)
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(f"bad value for {section}.{key}: {raw!r} ({e})")
    return cfg


def apply_overrides(cfg: dict, args: argparse.Namespace) -> dict:
    """Command-line flags win over the config file."""
    if args.model is not None:
        cfg["run"]["model"] = args.model
    if args.data_dir is not None:
        cfg["run"]["data_dir"] = args.data_dir
    if args.seed is not None:
        cfg["run"]["seed"] = args.seed
    if args.out is not None:
        cfg["run"]["out_dir"] = args.out
    if getattr(args, "alpha", None) is not None:
        cfg["search"]["alpha"] = args.alpha
    if getattr(args, "beta", None) is not None:
        cfg["search"]["beta"] = args.beta
    if getattr(args, "epochs", None) is not None:
        section = {"pretrain": "pretrain", "search": "search", "prune": "finetune"}.get(args.command)
        if section:
            cfg[section]["epochs"] = args.epochs
    return cfg


def _load_dataset(cfg: dict):
    name = cfg["run"]["dataset"]
    data_dir = cfg["run"]["data_dir"] or None
    if name == "mnist":
        return load_mnist(data_dir)
    if name == "cifar10":
        return load_cifar10(data_dir)
    raise ConfigError(f"unknown dataset {cfg['run']['dataset']!r}; expected mnist or cifar10")


def _input_shape(cfg: dict) -> tuple[int, int, int]:
    return (1, 28, 28) if cfg["run"]["dataset"] == "mnist" else (3, 32, 32)


def _splits(cfg: dict):
    train_full, test = _load_dataset(cfg)
    train, val = split_validation(
        train_full, cfg["run"]["validation_fraction"], seed=cfg["run"]["seed"]
    )
    return train, val, test


def _phase_manifest(cfg: dict, checksums: dict, seconds: float, extra: dict) -> dict:
    out = {
        "config": cfg,
        "dataset_checksums": checksums,
        "seed": cfg["run"]["seed"],
        "seconds": round(seconds, 3),
    }
    out.update(extra)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_pretrain(cfg: dict) -> int:
    t0 = time.perf_counter()
    train, val, test = _splits(cfg)
    seed = cfg["run"]["seed"]
    model = build_model(
        cfg["run"]["model"],
        num_classes=10,
        input_shape=_input_shape(cfg),
        rng=substream(seed, "init"),
    )
    p = cfg["pretrain"]
    result = train_supervised(
        model, train, val,
        epochs=p["epochs"], lr_max=p["lr_max"], lr_min=p["lr_min"],
        batch_size=p["batch_size"], seed=seed, augment=p["augment"],
    )
    top1 = evaluate(model, test.images, test.labels)
    out = Path(cfg["run"]["out_dir"]) / "baseline"
    write_csv(result.metrics, out / "metrics.csv")
    save_checkpoint(
        model, out,
        extra=_phase_manifest(cfg, train.checksums, time.perf_counter() - t0, {
            "phase": "pretrain",
            "top1": top1,
            "best_val_accuracy": result.best_val_accuracy,
            "diverged": result.diverged,
        }),
    )
    print(f"pretrain: model={cfg['run']['model']} top1={top1:.4f} "
          f"val={result.best_val_accuracy:.4f} -> {out}")
    return 1 if result.diverged else 0


def cmd_search(cfg: dict) -> int:
    t0 = time.perf_counter()
    out_root = Path(cfg["run"]["out_dir"])
    base_dir = out_root / "baseline"
    if not (base_dir / "manifest.json").is_file():
        raise FileNotFoundError(f"missing baseline checkpoint: expected {base_dir / 'manifest.json'}")
    model, base_manifest = load_checkpoint(base_dir)
    train, val, test = _splits(cfg)

    s = cfg["search"]
    sc = SearchConfig(
        alpha=s["alpha"], beta=s["beta"], epochs=s["epochs"], batch_size=s["batch_size"],
        lr_w_max=s["lr_w_max"], lr_w_min=s["lr_w_min"],
        lr_r_max=s["lr_r_max"], lr_r_min=s["lr_r_min"],
        cosine_period_epochs=s["cosine_period_epochs"],
        ranking_interval=s["ranking_interval"],
        inner_steps_per_outer=s["inner_steps_per_outer"],
        cost_in_inner_loss=s["cost_in_inner_loss"],
        log_interval=s["log_interval"], convergence_tol=s["convergence_tol"],
        probe_size=s["probe_size"], seed=cfg["run"]["seed"],
    )
    result = run_search(model, train, val, sc)

    out = out_root / "search"
    write_csv(result.metrics, out / "trajectory.csv")
    write_csv(result.refresh_events, out / "diagnostics.csv")
    plan = finalize_plan(model, result.ratios)
    (out / "result.json").parent.mkdir(parents=True, exist_ok=True)
    (out / "result.json").write_text(json.dumps({
        "ratios": {str(k): v for k, v in result.ratios.items()},
        "kept_counts": {str(k): v for k, v in result.kept_counts.items()},
        "active_channels": {str(k): v for k, v in result.active.items()},
        "fpr_exact": result.fpr_exact,
        "iterations": result.iterations,
        "epochs_run": result.epochs_run,
        "converged": result.converged,
        "kink_count": result.diagnostics.kink_count,
        "plan": plan.to_dict(),
    }, indent=2, sort_keys=True))
    save_checkpoint(
        model, out,
        extra=_phase_manifest(cfg, train.checksums, time.perf_counter() - t0, {
            "phase": "search",
            "fpr_exact": result.fpr_exact,
            "iterations": result.iterations,
            "converged": result.converged,
        }),
    )
    ratio_text = ", ".join(f"{k}:{v:.3f}" for k, v in sorted(result.ratios.items()))
    print(f"search: iterations={result.iterations} fpr_exact={result.fpr_exact:.4f} "
          f"ratios=[{ratio_text}] -> {out}")
    return 0


def cmd_prune(cfg: dict) -> int:
    t0 = time.perf_counter()
    out_root = Path(cfg["run"]["out_dir"])
    search_dir = out_root / "search"
    base_dir = out_root / "baseline"
    for need in (search_dir / "manifest.json", search_dir / "result.json", base_dir / "manifest.json"):
        if not need.is_file():
            raise FileNotFoundError(f"missing run artifact: expected {need}")
    model, _ = load_checkpoint(search_dir)
    result = json.loads((search_dir / "result.json").read_text())
    baseline = json.loads((base_dir / "manifest.json").read_text())
    train, val, test = _splits(cfg)

    plan = PruningPlan.from_dict(result["plan"])
    pruned = export_pruned(model, plan)
    f = cfg["finetune"]
    ft = finetune(
        pruned, train, val,
        epochs=f["epochs"], lr_max=f["lr_max"], lr_min=f["lr_min"],
        batch_size=f["batch_size"], seed=cfg["run"]["seed"], test=test,
    )
    out = out_root / "pruned"
    write_csv(ft.metrics, out / "metrics.csv")
    drop = baseline["top1"] - (ft.test_top1 or 0.0)
    save_checkpoint(
        pruned, out,
        extra=_phase_manifest(cfg, train.checksums, time.perf_counter() - t0, {
            "phase": "prune",
            "plan": plan.to_dict(),
            "top1": ft.test_top1,
            "baseline_top1": baseline["top1"],
            "accuracy_drop": drop,
            "fpr": plan.fpr,
            "best_val_accuracy": ft.best_val_accuracy,
            "diverged": ft.diverged,
        }),
    )
    print(f"prune: fpr={plan.fpr:.4f} top1={ft.test_top1:.4f} "
          f"drop={drop:.4f} -> {out}")
    return 1 if ft.diverged else 0


def cmd_report(cfg: dict) -> int:
    out_root = Path(cfg["run"]["out_dir"])
    base_path = out_root / "baseline" / "manifest.json"
    if not base_path.is_file():
        raise FileNotFoundError(f"missing run artifact: expected {base_path}")
    baseline = json.loads(base_path.read_text())
    pruned = None
    pruned_path = out_root / "pruned" / "manifest.json"
    if pruned_path.is_file():
        pruned = json.loads(pruned_path.read_text())

    report_dir = out_root / "report"
    rows = summary_rows(
        {"model": baseline["model"]["name"], "top1": baseline["top1"]},
        None if pruned is None else {
            "model": pruned["model"]["name"],
            "method": "auto-pruned",
            "top1": pruned["top1"],
            "fpr": pruned["fpr"],
        },
    )
    write_csv(rows, report_dir / "summary.csv")

    traj_path = out_root / "search" / "trajectory.csv"
    if traj_path.is_file():
        rows_t = read_csv(traj_path)
        it = [float(r["iteration"]) for r in rows_t]
        svg_line_plot(
            {"validation accuracy": (it, [float(r["val_accuracy"]) for r in rows_t])},
            report_dir / "accuracy.svg",
            title="Search validation accuracy", xlabel="iteration", ylabel="top-1",
        )
        svg_line_plot(
            {
                "cross entropy": (it, [float(r["loss_ce"]) for r in rows_t]),
                "flops cost": (it, [float(r["cost"]) for r in rows_t]),
            },
            report_dir / "loss.svg",
            title="Search loss terms", xlabel="iteration", ylabel="loss",
        )
        ratio_cols = sorted(
            (c for c in rows_t[0] if c.startswith("ratio_")), key=lambda c: int(c.split("_")[1])
        )
        svg_line_plot(
            {c.replace("_", " "): (it, [float(r[c]) for r in rows_t]) for c in ratio_cols},
            report_dir / "ratios.svg",
            title="Remaining ratios", xlabel="iteration", ylabel="ratio",
        )
        fpr_series = {"exact": (it, [float(r["fpr_exact"]) for r in rows_t]),
                      "surrogate": (it, [float(r["fpr_surrogate"]) for r in rows_t])}
        svg_line_plot(fpr_series, report_dir / "fpr.svg",
                      title="FLOPs pruned ratio", xlabel="iteration", ylabel="fraction")

    table = format_table(rows, ["model", "method", "top1", "accuracy_drop", "fpr"])
    print(table)
    print(f"report -> {report_dir}")
    return 0


def cmd_describe(cfg: dict) -> int:
    model = build_model(
        cfg["run"]["model"], num_classes=10, input_shape=_input_shape(cfg),
        rng=substream(cfg["run"]["seed"], "init"),
    )
    flops = layer_flops(model)
    rows = []
    for layer in model.layers:
        rows.append({
            "id": layer.id,
            "kind": layer.kind,
            "shape": f"{layer.in_channels}->{layer.out_channels}",
            "kernel": "x".join(str(k) for k in layer.kernel) if layer.kind in ("conv", "pool") else "",
            "stride": layer.stride if layer.kind == "conv" else "",
            "pad": layer.padding if layer.kind == "conv" else "",
            "prunable": "yes" if layer.prunable else "",
            "flops": flops[layer.id],
            "inputs": ",".join(str(p) for p in model.preds[layer.id]),
        })
    print(f"{model.name}  input={model.input_shape}  classes={model.num_classes}")
    print(format_table(rows))
    print(f"total flops: {exact_model_flops(model)}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="autoprune",
        description="Learned channel pruning for small CNNs (pretrain, search, prune, report).",
    )
    parser.add_argument("--version", action="version", version=f"autoprune {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_search_knobs=False, with_epochs=True):
        p.add_argument("--config", type=str, default=None, help="INI settings file")
        p.add_argument("--data-dir", type=str, default=None, help="dataset directory")
        p.add_argument("--seed", type=int, default=None, help="master random seed")
        p.add_argument("--model", type=str, default=None, help="cnn-small or resnet-tiny")
        p.add_argument("--out", type=str, default=None, help="run output directory")
        if with_search_knobs:
            p.add_argument("--alpha", type=float, default=None, help="cost term weight")
            p.add_argument("--beta", type=float, default=None, help="cost term exponent")
        if with_epochs:
            p.add_argument("--epochs", type=int, default=None, help="epoch budget for this phase")

    common(sub.add_parser("pretrain", help="train the dense baseline"))
    common(sub.add_parser("search", help="run the ratio search"), with_search_knobs=True)
    common(sub.add_parser("prune", help="export the plan and fine-tune"))
    common(sub.add_parser("report", help="emit plots and the summary table"), with_epochs=False)
    common(sub.add_parser("describe", help="print the architecture table"), with_epochs=False)
    return parser


COMMANDS = {
    "pretrain": cmd_pretrain,
    "search": cmd_search,
    "prune": cmd_prune,
    "report": cmd_report,
    "describe": cmd_describe,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = apply_overrides(load_config(args.config), args)
        return COMMANDS[args.command](cfg)
    except (ConfigError, DataFormatError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except SearchDiverged as e:
        print(f"error: search diverged: {e}\nstate: {json.dumps(e.state)}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
