"""Command-line entry points: synth, train, ablate, probe, eval, report.

Every subcommand is deterministic given its inputs and seed: reruns overwrite
outputs with byte-identical content.  Exit codes: 0 success, 2 usage/config
problem, 3 numeric failure (divergence).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .data import SyntheticBenchmark, load_embeddings, save_embeddings
from .errors import CheckpointError, ConfigError, DivergenceError, EmbeddingParseError
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    RunConfig,
    ablation_csv_rows,
    assign_groups,
    dataset_hash,
    evaluate,
    make_benchmark,
    metrics_csv_rows,
    metrics_json,
    probe_features,
    run_ablation,
    run_experiment,
    write_csv,
)

_ON_OFF = {"on": True, "off": False}
_LOSS_FLAG = {"ce": "ce", "logit-adjust": "logit_adjust", "graloss": "graloss"}


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _ensure_out(path_str: str) -> Path:
    out = Path(path_str)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write_test"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}", "out") from exc
    return out


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON config file (flat RunConfig keys)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--loss", choices=sorted(_LOSS_FLAG), default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--alpha-form", choices=["convex", "linear", "concave"], default=None)
    p.add_argument("--alpha-s", type=float, default=None)
    p.add_argument("--alpha-c", type=float, default=None)
    p.add_argument("--afg", choices=["on", "off"], default=None)
    p.add_argument("--kd", choices=["on", "off"], default=None)
    p.add_argument("--beta-init", type=float, default=None)
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--k-support", type=int, default=None)
    p.add_argument("--lambda", dest="tukey_lambda", type=float, default=None)
    p.add_argument("--im", type=float, default=None, help="imbalance ratio override")


def _config_from_args(args) -> RunConfig:
    data = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", "config")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}", "config") from exc
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object", "config")
    overrides = {
        "seed": args.seed,
        "loss": _LOSS_FLAG.get(getattr(args, "loss", None)),
        "tau": getattr(args, "tau", None),
        "alpha_form": getattr(args, "alpha_form", None),
        "alpha_s": getattr(args, "alpha_s", None),
        "alpha_c": getattr(args, "alpha_c", None),
        "afg": _ON_OFF.get(getattr(args, "afg", None)),
        "kd": _ON_OFF.get(getattr(args, "kd", None)),
        "beta_init": getattr(args, "beta_init", None),
        "gamma": getattr(args, "gamma", None),
        "k_support": getattr(args, "k_support", None),
        "tukey_lambda": getattr(args, "tukey_lambda", None),
        "imbalance": getattr(args, "im", None),
    }
    for key, value in overrides.items():
        if value is not None:
            data[key] = value
    return RunConfig.from_dict(data)


def _load_split_dir(data_dir: str) -> SyntheticBenchmark:
    base = Path(data_dir)
    paths = {name: base / f"{name}.emb" for name in ("train", "val", "test")}
    for name, path in paths.items():
        if not path.exists():
            raise ConfigError(f"missing embedding file: {path}", "data")
    return SyntheticBenchmark(
        train=load_embeddings(paths["train"]),
        val=load_embeddings(paths["val"]),
        test=load_embeddings(paths["test"]),
        true_means=None,
        true_variances=None,
    )


def cmd_synth(args) -> int:
    config = _config_from_args(args)
    out = _ensure_out(args.out)
    bench = make_benchmark(config)
    save_embeddings(out / "train.emb", bench.train)
    save_embeddings(out / "val.emb", bench.val)
    save_embeddings(out / "test.emb", bench.test)
    truth = {
        "counts": [int(c) for c in bench.counts],
        "means": [[float(v) for v in row] for row in bench.true_means],
        "variances": [[float(v) for v in row] for row in bench.true_variances],
        "dataset_hash": dataset_hash(bench),
    }
    _write_json(out / "truth.json", truth)
    _write_json(out / "config.json", config.to_dict())
    print(f"wrote train/val/test embeddings and truth sidecar to {out}")
    return 0


def cmd_train(args) -> int:
    config = _config_from_args(args)
    bench = _load_split_dir(args.data)
    m1 = None
    if args.stage == "2":
        if not args.m1:
            raise ConfigError("--stage 2 requires --m1 CHECKPOINT", "m1")
        m1 = load_checkpoint(args.m1)
        if m1.input_dim != bench.train.dim:
            raise ConfigError("checkpoint input dimension does not match the data", "m1")
    out = _ensure_out(args.out)
    result = run_experiment(
        config,
        bench=bench,
        stages=args.stage,
        m1=m1,
        dump_dir=out if config.dump_generated else None,
    )
    _write_json(out / "config.json", config.to_dict())
    if args.stage in ("1", "both"):
        save_checkpoint(out / "m1.ckpt", result.m1)
    if result.m2 is not None:
        save_checkpoint(out / "m2.ckpt", result.m2)
    (out / "metrics.json").write_text(metrics_json(result) + "\n")
    write_csv(out / "metrics.csv", metrics_csv_rows(result))
    print(f"stage1 test accuracy: {result.test_m1.overall:.4f}")
    if result.test_m2 is not None:
        print(f"stage2 test accuracy: {result.test_m2.overall:.4f}")
    return 0


def cmd_ablate(args) -> int:
    config = _config_from_args(args)
    seeds = None
    if args.seeds:
        try:
            seeds = tuple(int(s) for s in args.seeds.split(","))
        except ValueError:
            raise ConfigError(f"--seeds must be a comma list of ints: {args.seeds}", "seeds") from None
    out = _ensure_out(args.out)
    cells = run_ablation(config, args.axis, seeds=seeds, workers=args.workers)
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "ablation.json", [c.to_dict() for c in cells])
    write_csv(out / "ablation.csv", ablation_csv_rows(cells))
    rows = sorted({c.row for c in cells})
    print(f"{args.axis}: {len(rows)} rows x {len({c.seed for c in cells})} seeds -> {out}")
    return 0


def cmd_probe(args) -> int:
    config = _config_from_args(args)
    params = load_checkpoint(args.checkpoint)
    bench = _load_split_dir(args.data)
    if params.input_dim != bench.val.dim:
        raise ConfigError("checkpoint input dimension does not match the data", "checkpoint")
    out = _ensure_out(args.out)
    groups = assign_groups(bench.train.class_counts(), config.many_min, config.few_max)
    report = probe_features(params, bench.val, bench.test, config, groups)
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "metrics.json", {"probe": report.to_dict(), "dataset_hash": dataset_hash(bench)})
    rows = [
        {"model": "probe", "group": "overall", "accuracy": report.overall},
        *[{"model": "probe", "group": g, "accuracy": a} for g, a in report.groups.items()],
    ]
    write_csv(out / "metrics.csv", rows)
    print(f"probe accuracy: {report.overall:.4f}")
    return 0


def cmd_eval(args) -> int:
    config = _config_from_args(args)
    params = load_checkpoint(args.checkpoint)
    bench = _load_split_dir(args.data)
    if params.input_dim != bench.test.dim:
        raise ConfigError("checkpoint input dimension does not match the data", "checkpoint")
    out = _ensure_out(args.out)
    groups = assign_groups(bench.train.class_counts(), config.many_min, config.few_max)
    report = evaluate(params, bench.test, groups)
    _write_json(out / "config.json", config.to_dict())
    _write_json(out / "metrics.json", {"test": report.to_dict(), "dataset_hash": dataset_hash(bench)})
    rows = [
        {"model": "eval", "group": "overall", "accuracy": report.overall},
        *[{"model": "eval", "group": g, "accuracy": a} for g, a in report.groups.items()],
    ]
    write_csv(out / "metrics.csv", rows)
    print(f"test accuracy: {report.overall:.4f}")
    return 0


def cmd_report(args) -> int:
    from . import report as report_mod

    written = []
    if args.run:
        out = _ensure_out(args.out or args.run)
        written += report_mod.render_run(args.run, out)
    if args.ablation:
        out = _ensure_out(args.out or str(Path(args.ablation).parent))
        written += report_mod.render_ablation(args.ablation, out)
    if not written:
        raise ConfigError("nothing to report: pass --run DIR and/or --ablation CSV", "run")
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="taillab",
        description="Long-tail classification laboratory: synthesis, two-stage training, probing, ablation",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="synthesize a long-tail embedding benchmark")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--classes", dest="n_classes", type=int, default=None)
    p.add_argument("--feature-dim", dest="dim", type=int, default=None)
    p.add_argument("--n-max", dest="n_max", type=int, default=None)
    p.add_argument("--sep", dest="separation", type=float, default=None)
    p.add_argument("--val-per-class", dest="val_per_class", type=int, default=None)
    p.add_argument("--test-per-class", dest="test_per_class", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run stage one and/or stage two on an embedding benchmark")
    _add_config_flags(p)
    p.add_argument("--data", required=True, help="directory with train/val/test.emb")
    p.add_argument("--out", required=True)
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--m1", help="stage-one checkpoint (required with --stage 2)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("ablate", help="run one ablation axis over a seed set")
    _add_config_flags(p)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", choices=["alpha_form", "loss_choice", "components"], required=True)
    p.add_argument("--seeds", help="comma list, default config.seeds")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("probe", help="freeze features, retrain a fresh classifier on balanced data")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test split")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render figures from run or ablation outputs")
    p.add_argument("--run", help="a train output directory (metrics.json)")
    p.add_argument("--ablation", help="an ablation.csv file")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" (key: {exc.key})" if exc.key else ""
        print(f"error: {exc}{key}", file=sys.stderr)
        return 2
    except (EmbeddingParseError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
