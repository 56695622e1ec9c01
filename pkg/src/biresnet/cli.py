"""Command line entry point: ``biresnet <subcommand> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from . import datapipe, harness
from .datapipe import Dataset, DataError, DatasetManifest
from .model import BiResNetConfig, CheckpointError, load_model
from .motorsim import CLASS_NAMES, MachineParams, SimConfig, generate_dataset
from .nncore import NumericalError, ShapeError, UsageError
from .trainer import TrainConfig, build_model, deterministic, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class CliUsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise CliUsageError(message)


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        cfg = json.load(fh)
    if not isinstance(cfg, dict):
        raise CliUsageError("--config must hold a JSON object")
    unknown = set(cfg) - {"machine", "sim", "model", "train", "prepare", "grid"}
    if unknown:
        raise CliUsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _out_dir(args) -> str:
    out = args.out_dir or "."
    os.makedirs(out, exist_ok=True)
    return out


def _write_json(path, payload) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolution_factor(ms: float, sample_period: float) -> int:
    k = ms * 1e-3 / sample_period
    if abs(k - round(k)) > 1e-9:
        raise CliUsageError(f"--downsample-ms {ms} is not a multiple of the {sample_period * 1e3:g} ms sample period")
    if int(round(k)) not in datapipe.SUPPORTED_FACTORS:
        raise CliUsageError(f"--downsample-ms {ms} gives factor {int(round(k))}, "
                            f"supported factors are {datapipe.SUPPORTED_FACTORS}")
    return int(round(k))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_simulate(args, cfg) -> int:
    out = _out_dir(args)
    params = MachineParams.from_dict({**MachineParams().to_dict(), **cfg.get("machine", {})})
    sim = SimConfig(**cfg.get("sim", {}))
    records = generate_dataset(params, per_class=args.per_class, seed=args.seed, sim=sim)
    ds = Dataset.from_records(records)
    path = os.path.join(out, "dataset.brnd")
    datapipe.write_dataset(ds, path)
    manifest = DatasetManifest(
        sample_period=ds.sample_period,
        record_counts={"all": len(ds)},
        machine_params=params.to_dict(),
        seeds={"simulate": args.seed},
        record_seeds={"all": [int(s) for s in ds.seeds]},
        processing={"sim": sim.to_dict(), "per_class": args.per_class},
    )
    manifest.write(os.path.join(out, "manifest.json"))
    harness.write_provenance(out, "simulate", {"machine": params.to_dict(), "sim": sim.to_dict(),
                                               "per_class": args.per_class}, {"seed": args.seed})
    print(f"wrote {len(ds)} records to {path}")
    return EXIT_OK


def _read_raw(path) -> tuple[Dataset, DatasetManifest]:
    path = path if path.endswith(".brnd") else os.path.join(path, "dataset.brnd")
    man_path = os.path.join(os.path.dirname(path), "manifest.json")
    manifest = DatasetManifest.read(man_path) if os.path.exists(man_path) else DatasetManifest()
    return datapipe.read_dataset(path, manifest.sample_period, manifest.record_seeds.get("all")), manifest


def cmd_prepare(args, cfg) -> int:
    out = _out_dir(args)
    raw, raw_manifest = _read_raw(args.data)
    pcfg = cfg.get("prepare", {})
    ms = args.downsample_ms if args.downsample_ms is not None else pcfg.get("downsample_ms", raw.sample_period * 1e3)
    snr = args.snr_db if args.snr_db is not None else pcfg.get("snr_db")
    split_seed = args.split_seed if args.split_seed is not None else pcfg.get("split_seed", args.seed)
    noise_seed = args.noise_seed if args.noise_seed is not None else pcfg.get("noise_seed", args.seed)
    factor = _resolution_factor(ms, raw.sample_period)
    train_ds, val_ds, test_ds = datapipe.split(raw, seed=split_seed)
    parts = {"train": train_ds, "val": val_ds, "test": test_ds}
    for name, part in parts.items():
        if args.noise_first and snr is not None:
            part = datapipe.add_noise(part, snr, noise_seed)
        part = datapipe.downsample(part, factor)
        if not args.noise_first and snr is not None:
            part = datapipe.add_noise(part, snr, noise_seed)
        parts[name] = part
    stats = datapipe.compute_stats(parts["train"])
    for name, part in parts.items():
        part = datapipe.normalize(part, stats)
        datapipe.write_dataset(part, os.path.join(out, f"{name}.brnd"))
        parts[name] = part
    manifest = DatasetManifest(
        sample_period=parts["train"].sample_period,
        record_counts={k: len(v) for k, v in parts.items()},
        stats=stats,
        machine_params=raw_manifest.machine_params,
        seeds={**raw_manifest.seeds, "split": split_seed, "noise": noise_seed},
        record_seeds={k: [int(s) for s in v.seeds] for k, v in parts.items()},
        processing={"downsample_factor": factor, "downsample_ms": ms, "snr_db": snr,
                    "noise_order": "before_downsample" if args.noise_first else "after_downsample",
                    "normalization": "z-score, train statistics"},
    )
    manifest.write(os.path.join(out, "manifest.json"))
    inputs = [args.data if args.data.endswith(".brnd") else os.path.join(args.data, "dataset.brnd")]
    harness.write_provenance(out, "prepare", manifest.processing, manifest.seeds, inputs)
    print(" ".join(f"{k}={len(v)}" for k, v in parts.items()))
    return EXIT_OK


def _train_config(args, cfg) -> TrainConfig:
    d = {**cfg.get("train", {})}
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr0"),
                      ("intralink_n", "intralink_n")):
        v = getattr(args, flag, None)
        if v is not None:
            d[key] = v
    d["seed"] = args.seed
    try:
        return TrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise CliUsageError(str(exc)) from exc


def cmd_train(args, cfg) -> int:
    out = _out_dir(args)
    tcfg = _train_config(args, cfg)
    tr = datapipe.load_split(args.data, "train")
    va = datapipe.load_split(args.data, "val")
    model_cfg = BiResNetConfig.from_dict({**BiResNetConfig().to_dict(), **cfg.get("model", {})})
    if args.block_type:
        model_cfg = model_cfg.replace(block_type=args.block_type)
    model = build_model(model_cfg, tcfg, input_channels=tr.n_channels)
    _, history = train(model, tr, va, tcfg, out_dir=out)
    _write_json(os.path.join(out, "train_config.json"), tcfg.to_dict())
    inputs = [os.path.join(args.data, f) for f in ("train.brnd", "val.brnd", "manifest.json")]
    harness.write_provenance(out, "train", {"train": tcfg.to_dict(), "model": model.cfg.to_dict()},
                             {"train": tcfg.seed}, inputs)
    print(f"final val_acc={history.val_acc[-1]:.4f} epochs={len(history)}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    split = datapipe.load_split(args.data, args.split)
    acc, cm = evaluate(model, split)
    with open(os.path.join(out, "confusion.csv"), "w") as fh:
        fh.write("true\\pred," + ",".join(CLASS_NAMES) + "\n")
        for name, row in zip(CLASS_NAMES, cm):
            fh.write(name + "," + ",".join(str(int(v)) for v in row) + "\n")
    _write_json(os.path.join(out, "eval.json"), {"split": args.split, "accuracy": acc,
                                                  "confusion": cm.tolist(), "class_names": list(CLASS_NAMES)})
    harness.write_provenance(out, "eval", {"split": args.split}, {},
                             [args.model, os.path.join(args.data, f"{args.split}.brnd")])
    print(f"accuracy={acc:.4f}")
    return EXIT_OK


def cmd_occlude(args, cfg) -> int:
    out = _out_dir(args)
    model = load_model(args.model)
    split = datapipe.load_split(args.data, args.split)
    indices = args.index if args.index else range(len(split))
    summary = []
    for i in indices:
        if not 0 <= i < len(split):
            raise CliUsageError(f"record index {i} out of range (split has {len(split)})")
        m = harness.occlusion_map(model, split.X[i], int(split.labels[i]), args.window, args.stride,
                                  metric=args.metric, all_channels=args.all_channels,
                                  sample_period=split.sample_period, t_f=float(split.t_f[i]),
                                  record=f"{args.split}[{i}]")
        with open(os.path.join(out, f"occlusion_{i:04d}.csv"), "w") as fh:
            fh.write(m.to_csv())
        if args.svg:
            with open(os.path.join(out, f"occlusion_{i:04d}.svg"), "w") as fh:
                fh.write(m.to_svg())
        c, w = m.argmax()
        summary.append({"index": i, "label": int(split.labels[i]), "t_f": float(split.t_f[i]),
                        "baseline": m.baseline, "argmax_channel": m.channel_names[c],
                        "argmax_window_start_s": float(m.starts[w] * m.sample_period),
                        "localizes_onset": bool(m.localizes_onset())})
    _write_json(os.path.join(out, "occlusion_summary.json"), summary)
    harness.write_provenance(out, "occlude", {"window": args.window, "stride": args.stride, "metric": args.metric,
                                              "all_channels": args.all_channels}, {},
                             [args.model, os.path.join(args.data, f"{args.split}.brnd")])
    print(f"wrote {len(summary)} occlusion maps to {out}")
    return EXIT_OK


ABLATION_AXES = {
    "n": ("intralink_n", harness.AXES["intralink_n"]),
    "st_block": ("block_type", harness.AXES["block_type"]),
    "resolution": ("resolution_ms", harness.AXES["resolution_ms"]),
    "snr": ("snr_db", harness.AXES["snr_db"]),
}


def cmd_ablate(args, cfg) -> int:
    out = _out_dir(args)
    gcfg = cfg.get("grid", {})
    train_d = {**cfg.get("train", {})}
    if args.epochs is not None:
        train_d["epochs"] = args.epochs
    if args.batch_size is not None:
        train_d["batch_size"] = args.batch_size
    snr = args.snr_db if args.snr_db is not None else gcfg.get("snr_db")
    base = harness.CellConfig(resolution_ms=args.downsample_ms or gcfg.get("resolution_ms", 10), snr_db=snr,
                              intralink_n=args.intralink_n if args.intralink_n is not None else 1,
                              model=cfg.get("model", {}), train=train_d)
    seeds = tuple(args.seeds) if args.seeds else tuple(gcfg.get("seeds", (args.seed, args.seed + 1, args.seed + 2)))
    machine = cfg.get("machine", {})
    grid = harness.ExperimentGrid(base=base, seeds=seeds, per_class=args.per_class, machine=machine)
    if args.axis == "features":
        rows = harness.feature_importance(grid, out_dir=out, n_jobs=args.jobs)
    else:
        field_name, values = ABLATION_AXES[args.axis]
        grid.axes = {field_name: values}
        rows = harness.run_grid(grid, out_dir=out, n_jobs=args.jobs)
    harness.write_provenance(out, "ablate", {"axis": args.axis, "base": base.to_dict(), "per_class": args.per_class,
                                             "machine": machine}, {"grid": list(seeds)})
    for r in rows:
        print(f"cell {r['cell_id']}: mean_acc={r['mean_acc']:.4f} std={r['std_acc']:.4f} status={r['status']}")
    return EXIT_OK if all(r["status"] != "failed" for r in rows) else EXIT_NUMERICAL


def cmd_gradcheck(args, cfg) -> int:
    out = args.out_dir
    rows = harness.gradient_suite(seeds=range(args.seed, args.seed + args.seeds_count), h=args.h,
                                  exhaustive=args.exhaustive)
    print(f"{'layer':<24}{'max_rel_err':>14}{'threshold':>12}{'checked':>9}{'kinks':>7}  status")
    for r in rows:
        print(f"{r['layer']:<24}{r['max_rel_err']:>14.3e}{r['threshold']:>12.0e}{r.get('checked', 0):>9}"
              f"{r.get('kinks', 0):>7}  {'ok' if r['passed'] else 'FAIL'}")
    if out:
        os.makedirs(out, exist_ok=True)
        _write_json(os.path.join(out, "gradcheck.json"), rows)
        harness.write_provenance(out, "gradcheck", {"h": args.h, "seeds": args.seeds_count}, {"seed": args.seed})
    if not all(r["passed"] for r in rows):
        failed = ", ".join(r["layer"] for r in rows if not r["passed"])
        print(f"error: gradient check failed for {failed}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def _global_flags(parser, suppress: bool) -> None:
    # subcommands repeat the global flags without defaults so values given before the subcommand survive
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    parser.add_argument("--config", default=d(None), help="JSON file with machine/sim/model/train/prepare/grid sections")
    parser.add_argument("--seed", type=int, default=d(0))
    parser.add_argument("--out-dir", default=d(None))
    parser.add_argument("--deterministic", action="store_true", default=d(False),
                        help="single-threaded BLAS for bit-reproducible runs")
    parser.add_argument("-v", "--verbose", action="store_true", default=d(False))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    p = _Parser(prog="biresnet", description="Bi-ResNet motor fault diagnosis toolkit")
    _global_flags(p, suppress=False)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("simulate", parents=[common], help="simulate a labelled fault dataset")
    s.add_argument("--per-class", type=int, default=100)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("prepare", parents=[common], help="split, downsample, add noise and normalise")
    s.add_argument("--data", required=True, help="raw dataset.brnd or the directory holding it")
    s.add_argument("--downsample-ms", type=float, default=None)
    s.add_argument("--snr-db", type=float, default=None)
    s.add_argument("--split-seed", type=int, default=None)
    s.add_argument("--noise-seed", type=int, default=None)
    s.add_argument("--noise-first", action="store_true", help="inject noise before downsampling")
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("train", parents=[common], help="train a Bi-ResNet on a prepared dataset")
    s.add_argument("--data", required=True, help="directory written by prepare")
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--lr", type=float, default=None)
    s.add_argument("--intralink-n", type=int, default=None)
    s.add_argument("--block-type", choices=("st", "plain"), default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="accuracy and confusion matrix of a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("occlude", parents=[common], help="occlusion-sensitivity maps")
    s.add_argument("--model", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="test", choices=("train", "val", "test"))
    s.add_argument("--index", type=int, nargs="*", default=None)
    s.add_argument("--window", type=int, default=50)
    s.add_argument("--stride", type=int, default=25)
    s.add_argument("--metric", choices=("prob", "logit"), default="prob")
    s.add_argument("--all-channels", action="store_true")
    s.add_argument("--svg", action="store_true")
    s.set_defaults(func=cmd_occlude)

    s = sub.add_parser("ablate", parents=[common], help="run an experiment grid over one axis")
    s.add_argument("--axis", required=True, choices=tuple(ABLATION_AXES) + ("features",))
    s.add_argument("--seeds", type=int, nargs="*", default=None)
    s.add_argument("--per-class", type=int, default=100)
    s.add_argument("--downsample-ms", type=int, default=None)
    s.add_argument("--snr-db", type=float, default=None)
    s.add_argument("--intralink-n", type=int, default=None)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--batch-size", type=int, default=None)
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--seeds-count", type=int, default=20)
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--exhaustive", action="store_true", help="probe every coordinate of the end-to-end network")
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            raise CliUsageError("a subcommand is required")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _load_config(args.config)
        with deterministic(args.deterministic):
            return args.func(args, cfg)
    except (CliUsageError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError, ShapeError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"data error: {harness.format_exception(exc)}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
