"""Command-line entry point: ``ela --mode {analyze,simulate,train,report}``.

Exit codes: 0 success, 1 validation/configuration error, 2 numerical
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from .attention import AttentionMode, LayerStack
from .config import MODES, RunConfig, load_config, load_schedule, mapper_from_dict, schedule_to_dict
from .exceptions import ConfigError, ELAError, ReportIOError
from .mapping import MapperKind
from .pruning import PRESETS, AttentionTrace, PruneMask, flop_estimate, run_schedule
from .report import audit_rows, render_plots, write_rows, write_summary
from .synthetic import simulate_trace
from .traceio import TraceRecord, atomic_write_text, read_trace, write_trace
from .training import make_dataset, predict_labels, train_toy

log = logging.getLogger("ela")

__all__ = ["main", "cmd_analyze", "cmd_simulate", "cmd_train", "cmd_report", "build_parser"]


def _provenance(cfg: RunConfig) -> dict:
    m = cfg.mapper.as_dict()
    return {
        "config_hash": cfg.hash(),
        "mapper": m["kind"],
        "gamma": cfg.mapper.gamma_quantile,
        "alpha": m.get("alpha"),
        "beta": m.get("beta"),
        "rate": m.get("rate"),
        "fixed_k": cfg.mapper.fixed_k,
        "tau": cfg.tau,
        "epsilon": cfg.epsilon,
        "schedule": schedule_to_dict(cfg.schedule()),
    }


def _stage_summaries(audit) -> list[dict]:
    out = []
    for res in audit:
        active = res.series.active_layers
        out.append({
            "stage_id": res.stage_id,
            "epoch_window": list(res.series.epoch_window),
            "active_layers": list(active),
            "selected_layers": [active[k + 1] for k in res.scores.selected],
            "mask": list(res.mask.bits),
            "pruned_layers": [i + 1 for i, b in enumerate(res.mask.bits) if not b],
        })
    return out


def _flops(L, d, mask) -> dict:
    before = flop_estimate((L, d), PruneMask.ones(L))
    after = flop_estimate((L, d), mask)
    return {
        "before": {"attention": before[0], "total": before[1]},
        "after": {"attention": after[0], "total": after[1]},
        "attention_reduction": 1.0 - after[0] / before[0],
    }


def _summary_text(title, summary) -> str:
    lines = [title, ""]
    prov = summary["provenance"]
    lines.append(f"mapper={prov['mapper']} gamma={prov['gamma']} alpha={prov['alpha']} "
                 f"beta={prov['beta']} tau={prov['tau']} epsilon={prov['epsilon']}")
    lines.append(f"config hash {prov['config_hash']}")
    for st in summary["stages"]:
        lines.append(
            f"stage {st['stage_id']} epochs {st['epoch_window'][0]}-{st['epoch_window'][1]}: "
            f"{len(st['active_layers'])} active, candidates {st['selected_layers']}, "
            f"pruned so far {st['pruned_layers']}"
        )
    lines.append(f"final mask {''.join(str(b) for b in summary['final_mask'])}")
    if "flops" in summary:
        f = summary["flops"]
        lines.append(f"attention multiply-adds {f['before']['attention']} -> {f['after']['attention']} "
                     f"({100 * f['attention_reduction']:.1f}% fewer)")
    if "test_accuracy" in summary:
        lines.append(f"test accuracy {summary['test_accuracy']:.4f}")
    return "\n".join(lines) + "\n"


def _finish(cfg: RunConfig, out: Path, audit, summary, title) -> list[Path]:
    write_rows(out / "report.csv", audit_rows(audit))
    write_summary(out / "summary.json", summary)
    atomic_write_text(out / "summary.txt", _summary_text(title, summary))
    paths = [out / "report.csv", out / "summary.json", out / "summary.txt"]
    if cfg.plots:
        paths += render_plots(out)
    return paths


def cmd_analyze(cfg: RunConfig) -> list[Path]:
    """Score a recorded trace against the schedule and write the report files."""
    if not cfg.trace:
        raise ConfigError("analyze mode needs --trace")
    out = Path(cfg.out)
    records = read_trace(cfg.trace)
    trace = AttentionTrace(records)
    L = trace.layer_count()
    if L == 0:
        raise ConfigError(f"trace {cfg.trace} holds no records")
    audit = run_schedule(L, cfg.schedule(), trace, cfg.epsilon)
    final = audit[-1].mask if audit else PruneMask.ones(L)
    digest = hashlib.sha256(Path(cfg.trace).read_bytes()).hexdigest()
    summary = {
        "mode": "analyze",
        "provenance": {**_provenance(cfg), "trace_sha256": digest},
        "layer_count": L,
        "stages": _stage_summaries(audit),
        "final_mask": list(final.bits),
        "flops": _flops(L, cfg.dim, final),
    }
    log.info("analyzed %d records over %d layers", len(records), L)
    return _finish(cfg, out, audit, summary, "Redundant retrieval analysis")


def cmd_simulate(cfg: RunConfig) -> list[Path]:
    """Write a synthetic trace with the configured redundant layers."""
    path = Path(cfg.trace) if cfg.trace else Path(cfg.out) / "trace.jsonl"
    records = simulate_trace(cfg.layers, cfg.epochs, heads=cfg.heads, redundant=cfg.redundant, seed=cfg.seed)
    write_trace(records, path)
    return [path]


def cmd_train(cfg: RunConfig) -> list[Path]:
    """Train the toy stack with staged pruning and persist the audit trail."""
    schedule = cfg.schedule()
    late = [s.stage_id for s in schedule if s.epoch_window[1] > cfg.epochs]
    if late:
        raise ConfigError(f"stages {late} end after the last training epoch ({cfg.epochs})")
    out = Path(cfg.out)
    X, y = make_dataset(cfg.n_classes, cfg.n_samples, cfg.dim, cfg.noise, cfg.seed)
    n_test = int(round(cfg.n_samples * cfg.test_fraction))
    X_tr, y_tr, X_te, y_te = X[n_test:], y[n_test:], X[:n_test], y[:n_test]
    stack = LayerStack.init(cfg.layers, cfg.dim, cfg.heads, AttentionMode.ELA, seed=cfg.seed,
                            tied_queries=dict(cfg.tied_queries))
    report, readout = train_toy(stack, X_tr, y_tr, schedule, epochs=cfg.epochs, lr=cfg.lr,
                                batch_size=cfg.batch_size, seed=cfg.seed, epsilon=cfg.epsilon)
    acc = float(np.mean(predict_labels(stack, readout, X_te) == y_te)) if n_test else float("nan")
    summary = {
        "mode": "train",
        "provenance": _provenance(cfg),
        "layer_count": cfg.layers,
        "stages": _stage_summaries(report.audit),
        "final_mask": list(report.final_mask.bits),
        "flops": _flops(cfg.layers, cfg.dim, report.final_mask),
        "final_loss": report.losses[-1] if report.losses else None,
        "test_accuracy": acc,
    }
    curve = [{"epoch": i + 1, "loss": repr(l), "train_accuracy": repr(a)}
             for i, (l, a) in enumerate(zip(report.losses, report.accuracies))]
    write_rows(out / "loss_curve.csv", curve, ("epoch", "loss", "train_accuracy"))
    write_trace(
        [TraceRecord(e, d.layer_index, d.head_index, tuple(float(x) for x in d.weights))
         for e, d in report.trace.items()],
        out / "attention_trace.jsonl",
    )
    paths = _finish(cfg, out, report.audit, summary, "Toy training with staged pruning")
    return paths + [out / "loss_curve.csv", out / "attention_trace.jsonl"]


def cmd_report(cfg: RunConfig) -> list[Path]:
    """Render SVG charts from an existing report directory."""
    return render_plots(Path(cfg.out))


COMMANDS = {"analyze": cmd_analyze, "simulate": cmd_simulate, "train": cmd_train, "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ela", description=__doc__.splitlines()[0])
    p.add_argument("--mode", choices=MODES, help="command to run")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--preset", choices=sorted(PRESETS), help="hyperparameter preset")
    p.add_argument("--mapper", choices=[k.value for k in MapperKind])
    p.add_argument("--gamma", type=float, help="quantile of divergences eligible for pruning")
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--rate", type=float, help="exponential rate for the eqm mapper")
    p.add_argument("--tau", type=float, help="pruning threshold")
    p.add_argument("--epsilon", type=float, help="padding mass for adjacent KL")
    p.add_argument("--fixed-k", type=int)
    p.add_argument("--schedule", help="JSON schedule file")
    p.add_argument("--trace", help="trace file (input for analyze, output for simulate)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--layers", type=int)
    p.add_argument("--dim", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--redundant", help="comma-separated layers to plant as duplicates (simulate)")
    p.add_argument("--tie", action="append", default=[], metavar="DST:SRC",
                   help="tie a layer's query to an earlier layer (train)")
    p.add_argument("--plots", action="store_true", help="also write SVG charts")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def config_from_args(args) -> RunConfig:
    if args.config:
        cfg = load_config(args.config)
    elif args.preset:
        cfg = RunConfig.preset(args.preset)
    else:
        cfg = None
    base = cfg.to_dict() if cfg else {}
    if args.preset and args.config:
        base = {**RunConfig.preset(args.preset).to_dict(), **base}
    mapper = dict(base.get("mapper", {}))
    for key, val in (("kind", args.mapper), ("gamma", args.gamma), ("alpha", args.alpha),
                     ("beta", args.beta), ("rate", args.rate), ("fixed_k", args.fixed_k)):
        if val is not None:
            mapper[key] = val
    overrides = {
        "mode": args.mode, "tau": args.tau, "epsilon": args.epsilon, "trace": args.trace,
        "out": args.out, "seed": args.seed, "epochs": args.epochs, "layers": args.layers,
        "dim": args.dim, "heads": args.heads,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    if args.redundant:
        base["redundant"] = [int(x) for x in args.redundant.split(",") if x]
    if args.tie:
        try:
            base["tied_queries"] = [[int(a) for a in t.split(":")] for t in args.tie]
        except ValueError:
            raise ConfigError(f"--tie expects DST:SRC, got {args.tie}") from None
    if args.plots:
        base["plots"] = True
    base["mapper"] = mapper
    if args.schedule:
        sched = load_schedule(args.schedule, mapper_from_dict(mapper), base.get("tau", 0.3))
        base["schedule"] = schedule_to_dict(sched)
        base.pop("windows", None)
    return RunConfig.from_dict(base)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = config_from_args(args)
        paths = COMMANDS[cfg.mode](cfg)
    except ELAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ReportIOError.exit_code
    for path in paths:
        print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
