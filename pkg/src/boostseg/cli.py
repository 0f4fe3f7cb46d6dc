"""Command-line entry point: ``boostseg <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .autolr import PopulationError
from .grid import GridError
from .net import NetworkError
from .synthdata import GenerationError
from .trainer import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration")
    g.add_argument("--config", help="JSON config file (may name a preset)")
    g.add_argument("--preset", choices=sorted(ex.PRESETS))
    g.add_argument("--output-dir")
    g.add_argument("--seed", type=int)
    g.add_argument("--num-scans", type=int)
    g.add_argument("--split-fractions", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--dims", type=int, nargs=3, metavar=("NX", "NY", "NZ"))
    g.add_argument("--num-classes", type=int)
    g.add_argument("--sampler", choices=["boosted", "uniform"])
    g.add_argument("--schedule", choices=["constant", "step", "autolr"])
    g.add_argument("--lr", type=float, help="base learning rate for constant/step schedules")
    g.add_argument("--decay", type=float, help="step schedule decay factor")
    g.add_argument("--step", type=int, help="step schedule length in epochs")
    g.add_argument("--period", type=int, help="AutoLR period in epochs")
    g.add_argument("--epochs", type=int, dest="total_epochs")
    g.add_argument("--batch-size", type=int)
    g.add_argument("--batches-per-epoch", type=int)
    g.add_argument("--no-augment", action="store_true")
    g.add_argument("--log-wall-time", action="store_true")


def _overrides(args) -> dict:
    o: dict = {}
    if args.num_scans is not None:
        o["num_scans"] = args.num_scans
    if args.split_fractions is not None:
        o["split"] = list(args.split_fractions)
    if args.seed is not None:
        o["seed"] = args.seed
    if args.total_epochs is not None:
        o["total_epochs"] = args.total_epochs
    phantom = {}
    if args.dims is not None:
        phantom["dims"] = list(args.dims)
    if args.num_classes is not None:
        phantom["num_classes"] = args.num_classes
        o["network"] = {"num_classes": args.num_classes}
    if phantom:
        o["phantom"] = phantom
    if args.sampler is not None:
        o["sampler"] = {"mode": args.sampler}
    epochs = {}
    if args.batch_size is not None:
        epochs["batch_size"] = args.batch_size
    if args.batches_per_epoch is not None:
        epochs["batches_per_epoch"] = args.batches_per_epoch
    if epochs:
        o["epochs"] = epochs
    if args.no_augment:
        o["augment"] = {"enabled": False}
    if args.log_wall_time:
        o["log_wall_time"] = True
    return o


def _schedule_overrides(args, current: dict) -> dict | None:
    kind = args.schedule or current.get("kind")
    touched = any(v is not None for v in (args.schedule, args.lr, args.decay, args.step, args.period))
    if not touched:
        return None
    if kind == "autolr":
        s = dict(current) if current.get("kind") == "autolr" else dict(ex.PRESETS["multiclass"]["schedule"])
        if args.period is not None:
            s["period"] = args.period
        return s
    warmup = current.get("warmup", 10)
    rate = args.lr if args.lr is not None else current.get("rate", 0.001)
    if kind == "step":
        s = {"kind": "step", "rate": rate, "warmup": warmup,
             "decay": args.decay if args.decay is not None else current.get("decay", 0.5),
             "step": args.step if args.step is not None else current.get("step", 100)}
    else:
        s = {"kind": "constant", "rate": rate, "warmup": warmup}
    return s


def resolve_config(args) -> ex.ExperimentConfig:
    overrides = _overrides(args)
    if args.config:
        d = ex.load_config_dict(args.config, args.preset, overrides)
    else:
        d = ex.ExperimentConfig.layered(overrides, args.preset)
    sched = _schedule_overrides(args, d["schedule"])
    if sched is not None:
        d["schedule"] = sched
    out = args.output_dir or os.environ.get(ex.ENV_OUTPUT_DIR)
    if out:
        d["output_dir"] = out
    return ex.ExperimentConfig.from_dict(d)


def _data_dir(args, cfg) -> Path:
    return Path(args.data_dir) if args.data_dir else Path(cfg.output_dir) / "data"


# -- subcommands ------------------------------------------------------------------------

def cmd_print_config(args) -> int:
    print(resolve_config(args).to_json())
    return EXIT_OK


def cmd_generate_data(args) -> int:
    cfg = resolve_config(args)
    out = ex.generate_data(cfg, _data_dir(args, cfg))
    counts = ex.split_counts(cfg.num_scans, cfg.split)
    print(f"wrote {cfg.num_scans} scans to {out} (train/val/test = {counts[0]}/{counts[1]}/{counts[2]})")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = ex.load_dataset(_data_dir(args, cfg), cfg)
    out = Path(args.run_dir) if args.run_dir else Path(cfg.output_dir) / "train"

    def progress(*a):
        rec = a[-1]
        if not args.quiet:
            print(f"epoch {rec.epoch:4d}  iter {rec.iteration:7d}  lr {rec.learning_rate:.5g}  "
                  f"loss {rec.train_loss:.4f}  dice {rec.mean_dice:.4f}", flush=True)

    res = ex.train(cfg, data, out, callback=progress)
    print(f"final mean Dice {res.records[-1].mean_dice:.4f}; artefacts in {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = resolve_config(args)
    rows = ex.evaluate_checkpoint(args.checkpoint, cfg, args.split, args.postprocess, _data_dir(args, cfg))
    text = ex.evaluation_csv(rows, cfg.phantom.num_classes)
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text)
    return EXIT_OK


def cmd_export_error_maps(args) -> int:
    from . import sampler as smp
    from .net import load_checkpoint

    cfg = resolve_config(args)
    data = ex.load_dataset(_data_dir(args, cfg), cfg)
    net, _, _ = load_checkpoint(args.checkpoint)
    if net.spec.to_dict() != cfg.network.to_dict():
        raise ex.ConfigError("checkpoint network spec does not match the config")
    state = smp.init_sampler(data.volumes["train"], data.labels["train"], smp.BOOSTED,
                             cfg.phantom.num_classes, refresh_fraction=1.0)
    smp.update_error_maps(state, net, data.volumes["train"], data.labels["train"])
    out = Path(args.out) if args.out else Path(cfg.output_dir) / "error_maps"
    paths = ex.export_error_maps(state, data.names["train"], out, cfg.phantom.spacing)
    for name, e in zip(data.names["train"], state.error_maps):
        print(f"{name}  mean error {float(np.mean(e)):.5f}")
    print(f"wrote {len(paths)} error maps to {out}")
    return EXIT_OK


def _parse_vary(items) -> list[tuple[str, dict]]:
    out = []
    for item in items:
        label, _, spec = item.partition("=")
        if not spec:
            raise ex.ConfigError(f"--vary expects LABEL=JSON, got {item!r}")
        try:
            d = json.loads(spec)
        except json.JSONDecodeError as exc:
            raise ex.ConfigError(f"--vary {label}: invalid JSON: {exc}") from exc
        out.append((label, d))
    return out


def cmd_compare(args) -> int:
    base = resolve_config(args)
    configs, labels = [], []
    for path in args.configs or []:
        configs.append(ex.load_config(path))
        labels.append(Path(path).stem)
    for label, d in _parse_vary(args.vary or []):
        configs.append(ex.ExperimentConfig.from_dict(ex.deep_merge(base.to_dict(), d)))
        labels.append(label)
    if len(configs) < 2:
        raise ex.ConfigError("compare needs at least two configs (--configs and/or --vary)")
    out = Path(args.out) if args.out else Path(base.output_dir) / "compare"
    out.mkdir(parents=True, exist_ok=True)
    comp = ex.compare(configs, labels, args.seeds, out, args.workers)
    h = ex.config_hash({"configs": [c.to_dict() for c in configs], "labels": labels, "seeds": args.seeds})
    (out / "curves.csv").write_text(comp.curves_csv(h))
    summary = comp.summary_csv(args.threshold, h)
    (out / "summary.csv").write_text(summary)
    sys.stdout.write(summary)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="boostseg", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("print-config", help="print the fully resolved config as JSON")
    _common(s)
    s.set_defaults(func=cmd_print_config)

    s = sub.add_parser("generate-data", help="write synthetic phantoms and split lists")
    _common(s)
    s.add_argument("--data-dir")
    s.set_defaults(func=cmd_generate_data)

    s = sub.add_parser("train", help="train one config (single schedule or AutoLR)")
    _common(s)
    s.add_argument("--data-dir")
    s.add_argument("--run-dir")
    s.add_argument("--quiet", action="store_true")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="per-class Dice of a checkpoint on a split")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir")
    s.add_argument("--split", default="test", choices=list(ex.SPLITS))
    s.add_argument("--postprocess", action="store_true", help="keep the largest component per class")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("compare", help="multi-seed comparison along one config axis")
    _common(s)
    s.add_argument("--configs", nargs="*", help="config files to compare")
    s.add_argument("--vary", nargs="*", metavar="LABEL=JSON",
                   help="variants of the base config, e.g. uniform='{\"sampler\": {\"mode\": \"uniform\"}}'")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--threshold", type=float, default=0.8)
    s.add_argument("--workers", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_compare)

    s = sub.add_parser("export-error-maps", help="write 1 - p(true class) maps for the train split")
    _common(s)
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data-dir")
    s.add_argument("--out")
    s.set_defaults(func=cmd_export_error_maps)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (TrainingError, PopulationError, FloatingPointError) as exc:
        where = ""
        if isinstance(exc, TrainingError) and exc.epoch is not None:
            where = f" (epoch {exc.epoch}, iteration {exc.iteration})"
        print(f"boostseg: numerical failure{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ex.ConfigError, GridError, NetworkError, GenerationError, OSError) as exc:
        print(f"boostseg: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
