"""Command-line entry point: train, sweep, attack, analyze, report.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

from . import attacks as A
from . import data as D
from . import harness as H
from . import network as nw
from . import training as T

logger = logging.getLogger("saliency_align")

MNIST_ENV = "SALIENCY_MNIST_DIR"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config with optional 'train', 'dataset', 'model', 'attacks' sections")
    p.add_argument("--seed", type=int, help="seed for initialization, shuffling and dropout")
    p.add_argument("--out-dir", type=Path, default=Path("."), help="output directory (created if missing)")
    p.add_argument("--dataset", choices=("mnist", "blobs"), help="dataset kind (default: config, checkpoint, else blobs)")
    p.add_argument("--mnist-dir", type=Path, help=f"directory with MNIST IDX files (or set ${MNIST_ENV})")
    p.add_argument("-v", "--verbose", action="store_true")


def _attack_opts(p: argparse.ArgumentParser) -> None:
    p.add_argument("--samples", type=int, default=100, help="number of validation samples")
    p.add_argument("--attacks", nargs="+", choices=A.ATTACK_NAMES, default=list(A.ATTACK_NAMES))


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="saliency-align", description="Robustness versus saliency alignment experiments.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _common(p)
    p.add_argument("--lambda", dest="lam", type=float, help="penalty weight")

    p = sub.add_parser("sweep", help="train one model per lambda from the same initialization")
    _common(p)
    p.add_argument("--lambda", dest="lam", type=float, nargs="+", required=True, help="ascending lambda values")

    p = sub.add_parser("attack", help="run attacks on a checkpoint and write per-sample norms")
    _common(p)
    _attack_opts(p)
    p.add_argument("checkpoint", type=Path)

    p = sub.add_parser("analyze", help="write the SampleRecord CSV for a checkpoint")
    _common(p)
    _attack_opts(p)
    p.add_argument("checkpoint", type=Path)

    p = sub.add_parser("report", help="aggregate record CSVs into summary and long-format reports")
    p.add_argument("records", type=Path, nargs="+")
    p.add_argument("--out-dir", type=Path, default=Path("."))
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


# --- configuration helpers -------------------------------------------------------------


def _load_config(args) -> dict:
    if getattr(args, "config", None) is None:
        return {}
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{args.config}: invalid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValueError(f"{args.config}: top level must be an object")
    return cfg


def _dataset_spec(args, cfg: dict, fallback: dict | None = None) -> dict:
    spec = dict(fallback or {})
    spec.update(cfg.get("dataset", {}))
    if args.dataset:
        if args.dataset != spec.get("kind"):
            spec = {k: v for k, v in spec.items() if k in ("n_train", "n_validation")} if args.dataset == "mnist" else {}
        spec["kind"] = args.dataset
    spec.setdefault("kind", "blobs")
    if spec["kind"] == "mnist":
        d = args.mnist_dir or spec.get("mnist_dir") or os.environ.get(MNIST_ENV)
        if not d:
            raise UsageError(f"mnist needs --mnist-dir or ${MNIST_ENV}")
        spec["mnist_dir"] = str(d)
    return spec


def _load_dataset(spec: dict, seed: int) -> D.Dataset:
    if spec["kind"] == "mnist":
        # explicit sizes must be available; the defaults shrink to smaller sample files
        return D.load_mnist(spec["mnist_dir"], n_train=int(spec.get("n_train", 10000)),
                            n_validation=int(spec.get("n_validation", 1000)),
                            strict="n_train" in spec or "n_validation" in spec)
    return D.synth_gaussian_blobs(int(spec.get("n_classes", 3)), int(spec.get("n_per_class", 200)),
                                  int(spec.get("dim", 2)), float(spec.get("separation", 4.0)),
                                  seed=int(spec.get("seed", seed)))


def _model_spec(cfg: dict, ds: D.Dataset):
    model = cfg.get("model")
    if model is None:
        if ds.meta.get("source") == "mnist":
            return "mnist-paper"
        d = ds.input_shape[0]
        return [nw.dense(d, 32), nw.relu(), nw.dense(32, 32), nw.relu(), nw.dense(32, ds.n_classes)]
    if isinstance(model, str):
        return model
    return [nw.LayerSpec.from_dict(l) for l in model]


def _train_config(args, cfg: dict, lam: float | None = None) -> T.TrainConfig:
    d = dict(cfg.get("train", {}))
    if args.seed is not None:
        d["seed"] = args.seed
    if lam is not None:
        d["lam"] = lam
    return T.TrainConfig.from_dict(d)


def _attack_configs(args, cfg: dict, ds: D.Dataset) -> dict[str, A.AttackConfig]:
    box = (0.0, 1.0) if ds.normalization and ds.normalization.get("scheme") == "unit-range" else None
    out = {}
    for name in args.attacks:
        base = A.default_config(name, box).to_dict()
        over = dict(cfg.get("attacks", {}).get(name, {}))
        base.update(over)
        if base.get("box_constraints") is not None:
            base["box_constraints"] = tuple(base["box_constraints"])
        if args.seed is not None:
            base["seed"] = args.seed
        out[name] = A.AttackConfig(**base)
    return out


def _net_from_cfg(spec, seed: int, ds: D.Dataset) -> nw.Network:
    shape = None if isinstance(spec, str) else ds.input_shape
    return nw.build_network(spec, seed=seed, input_shape=shape)


# --- commands ----------------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args)
    tcfg = _train_config(args, cfg, args.lam)
    dspec = _dataset_spec(args, cfg)
    ds = _load_dataset(dspec, tcfg.seed)
    net = _net_from_cfg(_model_spec(cfg, ds), tcfg.seed, ds)
    net, hist = T.train(net, ds, tcfg)
    net.meta["dataset"] = dspec
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / "model.saln"
    H.save_checkpoint(net, path)
    (args.out_dir / "history.json").write_text(json.dumps(hist.to_dict(), indent=2) + "\n")
    print(path)
    return 0


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    tcfg = _train_config(args, cfg)
    dspec = _dataset_spec(args, cfg)
    ds = _load_dataset(dspec, tcfg.seed)
    entries = T.lambda_sweep(tcfg, args.lam, ds, spec=_net_from_cfg(_model_spec(cfg, ds), tcfg.seed, ds))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for k, e in enumerate(entries):
        item = {"lambda": e.lam, "checkpoint": None, "error": e.error}
        if e.network is not None:
            e.network.meta["dataset"] = dspec
            path = args.out_dir / f"model_{k}.saln"
            H.save_checkpoint(e.network, path)
            item["checkpoint"] = str(path)
            item["final_val_accuracy"] = e.history.val_accuracy[-1] if len(e.history) else None
        index.append(item)
    (args.out_dir / "sweep.json").write_text(json.dumps(index, indent=2) + "\n")
    failed = sum(e.error is not None for e in entries)
    print(f"{len(entries) - failed}/{len(entries)} models trained; index at {args.out_dir / 'sweep.json'}")
    return 0 if failed < len(entries) else 2


def _checkpoint_and_data(args):
    cfg = _load_config(args)
    net = H.load_checkpoint(args.checkpoint)
    dspec = _dataset_spec(args, cfg, fallback=net.meta.get("dataset"))
    seed = args.seed if args.seed is not None else int(net.meta.get("seed", 0))
    ds = _load_dataset(dspec, seed)
    if ds.input_shape != net.input_shape:
        raise ValueError(f"dataset input shape {ds.input_shape} does not fit the checkpoint's {net.input_shape}")
    return cfg, net, ds


def cmd_attack(args) -> int:
    cfg, net, ds = _checkpoint_and_data(args)
    val = ds.validation
    if not 0 <= args.samples <= len(val):
        raise UsageError(f"--samples must lie in [0, {len(val)}]")
    cfgs = _attack_configs(args, cfg, ds)
    results = A.run_attacks_batch(net, val.images[:args.samples], cfgs) if args.samples else {}
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["sample_index", "attack", "success", "norm", "adversarial_class", "queries"])
    for k in range(args.samples):
        for name in cfgs:
            r = results[name][k]
            w.writerow([k, name, H.format_value(r.success), H.format_value(r.norm),
                        H.format_value(r.adversarial_class), r.queries])
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / f"{args.checkpoint.stem}_attacks.csv"
    path.write_text(buf.getvalue())
    print(path)
    return 0


def cmd_analyze(args) -> int:
    cfg, net, ds = _checkpoint_and_data(args)
    if not 0 <= args.samples <= len(ds.validation):
        raise UsageError(f"--samples must lie in [0, {len(ds.validation)}]")
    cfgs = _attack_configs(args, cfg, ds)
    records = H.analyze_model(net, ds, cfgs, args.samples)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    path = args.out_dir / f"{args.checkpoint.stem}_records.csv"
    H.write_records_csv(records, path)
    meta = {"model": args.checkpoint.stem, "lambda": net.meta.get("lambda"),
            "normalization": ds.normalization, "attacks": {k: v.to_dict() for k, v in cfgs.items()},
            "samples": args.samples}
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    print(path)
    return 0


def cmd_report(args) -> int:
    per_model = []
    for path in args.records:
        records = H.read_records_csv(path)
        meta_path = Path(str(path) + ".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        name = meta.get("model", path.stem)
        if not records:
            logger.warning("%s holds no records; skipped", path)
            continue
        per_model.append((H.aggregate(records, meta.get("lambda"), model=name), records))
    if not per_model:
        raise ValueError("no records to report")
    per_model.sort(key=lambda sr: (sr[0].lam is None, sr[0].lam if sr[0].lam is not None else 0.0, sr[0].model))
    args.out_dir.mkdir(parents=True, exist_ok=True)
    H.write_summary([s for s, _ in per_model], args.out_dir / "summary.csv", args.out_dir / "summary.json")
    H.write_long_csv(per_model, args.out_dir / "figures_long.csv")
    print(args.out_dir / "summary.csv")
    return 0


COMMANDS = {"train": cmd_train, "sweep": cmd_sweep, "attack": cmd_attack, "analyze": cmd_analyze, "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(str(exc))
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        sys.stderr.write(f"usage error: {exc}\n")
        return 1
    except (OSError, ValueError, KeyError, RuntimeError, ArithmeticError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
