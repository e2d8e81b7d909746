"""Command-line entry point: ``swindr {gen-synth,preprocess,train,eval,bench}``.

Exit codes: 0 success, 2 invalid arguments/config/layout, 3 unreadable
image, 4 non-finite loss, 5 parameter schema mismatch.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import hashlib
import io
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import kernels
from .data import PreprocessOptions, load_split
from .model import ModelConfig, SchemaError, init_params, load_params, save_params
from .preprocess import (
    GRADES,
    SPLITS,
    AugmentPolicy,
    ClaheParams,
    DatasetManifest,
    ManifestEntry,
    preprocess_image,
    read_image,
    write_image,
)
from .synth import gen_synthetic
from .tensor import Tensor
from .training import NonFiniteLoss, TrainConfig, confusion_matrix, evaluate, metrics_from_confusion, \
    predict_proba, train
from .windowing import flops_msa, flops_wmsa, global_attention, window_attention, window_partition

EXIT_OK, EXIT_INVALID, EXIT_UNREADABLE, EXIT_NONFINITE, EXIT_SCHEMA = 0, 2, 3, 4, 5

log = logging.getLogger("swindr")

DEFAULT_CONFIG = {
    "seed": None,
    "data": {"manifest": None},
    "model": ModelConfig().to_dict(),
    "train": {k: v for k, v in TrainConfig().to_dict().items() if k != "seed"},
    "preprocess": {"crop": True, "clahe": True, "crop_threshold": 10},
    "clahe": {"clip_limit": 2.0, "tiles_x": 8, "tiles_y": 8, "bins": 256, "per_channel": False},
    "augment": {"enabled": True, "rotate": True, "flip": True, "max_angle": 360.0},
    "out": "runs",
}


class UsageError(Exception):
    """Invalid config, arguments or dataset layout (exit 2)."""


class UnreadableImage(Exception):
    """An image file could not be decoded (exit 3)."""


# ------------------------------------------------------------------ config


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        key = f"{where}{k}"
        if k not in out:
            raise UsageError(f"unknown config key '{key}'")
        if isinstance(out[k], dict) and out[k] and not isinstance(v, dict):
            raise UsageError(f"config key '{key}' must be an object")
        out[k] = _merge(out[k], v, key + ".") if isinstance(out[k], dict) and out[k] else v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    """Apply one ``dotted.key=value`` override; the value is parsed as JSON when possible."""
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got '{assignment}'")
    key, raw = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise UsageError(f"unknown config key '{key}'")
        node = node[p]
    if parts[-1] not in node:
        raise UsageError(f"unknown config key '{key}'")
    node[parts[-1]] = _parse_value(raw)


def load_config(args) -> dict:
    """Defaults, then the JSON file, then ``--set``, ``--seed`` and the ablation switches."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            user = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(user, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = _merge(cfg, user)
    for assignment in getattr(args, "set", None) or []:
        apply_override(cfg, assignment)
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    if getattr(args, "no_clahe", False):
        cfg["preprocess"]["clahe"] = False
    if getattr(args, "no_crop", False):
        cfg["preprocess"]["crop"] = False
    if getattr(args, "no_augment", False):
        cfg["augment"]["enabled"] = False
    if getattr(args, "out", None):
        cfg["out"] = args.out
    return cfg


def build_objects(cfg: dict, require_seed: bool = False):
    """Validate a merged config into typed objects; raises UsageError naming the field.

    Training needs an explicit seed; other commands fall back to 0.
    """
    seed = cfg.get("seed")
    if seed is None and not require_seed:
        seed = 0
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise UsageError(f"field 'seed' must be a non-negative integer (config or --seed), got {seed!r}")
    try:
        model = ModelConfig.from_dict(cfg["model"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"field 'model': {exc}") from None
    try:
        tcfg = TrainConfig(seed=seed, **cfg["train"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"field 'train': {exc}") from None
    try:
        clahe = ClaheParams(**cfg["clahe"])
    except (TypeError, ValueError) as exc:
        raise UsageError(f"field 'clahe': {exc}") from None
    try:
        opts = PreprocessOptions(**cfg["preprocess"])
    except TypeError as exc:
        raise UsageError(f"field 'preprocess': {exc}") from None
    aug = dict(cfg["augment"])
    policy = AugmentPolicy(**{k: v for k, v in aug.items() if k != "enabled"}) if aug.get("enabled") else None
    return model, tcfg, clahe, opts, policy


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


def _manifest(cfg: dict) -> DatasetManifest:
    path = cfg["data"].get("manifest")
    if not path:
        raise UsageError("field 'data.manifest' is required")
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise UsageError(f"field 'data.manifest': dataset manifest not found at {path}")
    try:
        return DatasetManifest.load(path)
    except (KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"field 'data.manifest': malformed manifest {path}: {exc}") from None


def _load(manifest, split, model, opts, clahe):
    try:
        return load_split(manifest, split, model.image_size, opts, clahe)
    except (OSError, ValueError) as exc:
        raise UnreadableImage(str(exc)) from None


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


# ---------------------------------------------------------------- commands


def cmd_gen_synth(args) -> int:
    ratios = tuple(float(r) for r in args.ratios.split(","))
    manifest = gen_synthetic(args.out, args.n_per_class, args.image_size, args.seed, args.corrupt, ratios)
    _print_counts(manifest)
    return EXIT_OK


def _print_counts(manifest: DatasetManifest) -> None:
    print("split," + ",".join(f"grade{g}" for g in GRADES))
    for s in SPLITS:
        counts = [sum(1 for e in manifest.entries if e.split == s and e.grade == g) for g in GRADES]
        print(s + "," + ",".join(map(str, counts)))


def scan_layout(root: Path) -> DatasetManifest:
    """Manifest from ``root/manifest.json`` or from the ``<split>/<grade>/<name>.png`` layout."""
    if not root.is_dir():
        raise UsageError(f"input directory not found: {root}")
    if (root / "manifest.json").is_file():
        return DatasetManifest.load(root / "manifest.json")
    entries = []
    for path in sorted(root.rglob("*")):
        if not path.is_file():
            continue
        rel = path.relative_to(root)
        parts = rel.parts
        if len(parts) != 3 or parts[0] not in SPLITS or parts[1] not in {str(g) for g in GRADES}:
            raise UsageError(f"unexpected file {rel}; expected <split>/<grade 0-4>/<name>.png")
        entries.append(ManifestEntry(rel.as_posix(), int(parts[1]), parts[0]))
    if not entries:
        raise UsageError(f"no images under {root}; expected <split>/<grade 0-4>/<name>.png")
    return DatasetManifest(entries, seed=0, root=str(root))


def cmd_preprocess(args) -> int:
    cfg = load_config(args)
    model, _, clahe, opts, _ = build_objects(cfg)
    src = scan_layout(Path(args.input))
    out = Path(args.out)
    entries = []
    for e in src.entries:
        path = src.resolve(e)
        try:
            img = read_image(path)
        except (OSError, ValueError) as exc:
            raise UnreadableImage(f"{path}: {exc}") from None
        try:
            result = preprocess_image(img, model.image_size, opts.crop, opts.clahe, clahe, opts.crop_threshold)
        except ValueError as exc:
            raise UnreadableImage(f"{path}: {exc}") from None
        write_image(out / e.path, result)
        entries.append(ManifestEntry(e.path, e.grade, e.split))
    manifest = DatasetManifest(entries, src.seed, src.ratios, root=str(out))
    manifest.save(out / "manifest.json")
    _print_counts(manifest)
    return EXIT_OK


def _file_logger(path: Path) -> logging.Handler:
    handler = logging.FileHandler(path, mode="w")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger("swindr").addHandler(handler)
    logging.getLogger("swindr").setLevel(logging.INFO)
    return handler


def cmd_train(args) -> int:
    cfg = load_config(args)
    model, tcfg, clahe, opts, policy = build_objects(cfg, require_seed=True)
    manifest = _manifest(cfg)
    run_dir = Path(cfg["out"]) / f"{config_hash(cfg)}-s{cfg['seed']}"
    if (run_dir / "params.bin").exists():
        raise UsageError(f"run directory {run_dir} already holds a finished run; runs are immutable")
    run_dir.mkdir(parents=True, exist_ok=True)
    handler = _file_logger(run_dir / "run.log")
    try:
        log.info("backend %s", kernels.BACKEND)
        for line in json.dumps(cfg, indent=1, sort_keys=True).splitlines():
            log.info("config %s", line)
        log.info("effective model %s", json.dumps(model.to_dict(), sort_keys=True))
        log.info("effective train %s", json.dumps(tcfg.to_dict(), sort_keys=True))
        log.info("effective clahe %s", json.dumps(dataclasses.asdict(clahe), sort_keys=True))
        log.info("effective preprocess %s", json.dumps(dataclasses.asdict(opts), sort_keys=True))
        log.info("effective augment %s", json.dumps(dataclasses.asdict(policy) if policy else None))
        _write_json(run_dir / "config.json", cfg)
        Xtr, ytr = _load(manifest, "train", model, opts, clahe)
        Xv, yv = _load(manifest, "val", model, opts, clahe)
        Xte, yte = _load(manifest, "test", model, opts, clahe)
        log.info("loaded %d train / %d val / %d test images", len(ytr), len(yv), len(yte))
        params = init_params(model, cfg["seed"])
        try:
            best, history = train(model, params, Xtr, ytr, Xv, yv, tcfg, policy)
        except NonFiniteLoss:
            log.exception("training diverged")
            raise
        save_params(run_dir / "params.bin", best)
        (run_dir / "history.json").write_text(history.to_json() + "\n")
        report = {}
        for split, X, y in (("val", Xv, yv), ("test", Xte, yte)):
            if len(y):
                m = evaluate(X, y, model, best)
                report[split] = m.to_dict()
                (run_dir / f"confusion_{split}.csv").write_text(m.confusion_csv())
                if split == "test":
                    (run_dir / "confusion.csv").write_text(m.confusion_csv())
                    print(m.table())
        report["preprocess"] = cfg["preprocess"]
        report["best_epoch"] = history.best_epoch
        _write_json(run_dir / "metrics.json", report)
        log.info("stop: %s; best epoch %d", history.stop_reason, history.best_epoch)
    finally:
        logging.getLogger("swindr").removeHandler(handler)
        handler.close()
    print(run_dir)
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = load_config(args)
    model, _, clahe, opts, _ = build_objects(cfg)
    if not Path(args.params).is_file():
        raise UsageError(f"parameter file not found: {args.params}")
    params = load_params(args.params, model)
    manifest = _manifest(cfg)
    X, y = _load(manifest, args.split, model, opts, clahe)
    if len(y) == 0:
        raise UsageError(f"split '{args.split}' is empty")
    metrics = evaluate(X, y, model, params)
    out = Path(args.out) if args.out else Path(args.params).parent
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / f"metrics_{args.split}.json", {args.split: metrics.to_dict()})
    (out / f"confusion_{args.split}.csv").write_text(metrics.confusion_csv())
    print(metrics.table())
    return EXIT_OK


# ------------------------------------------------------------------ bench


def _bench_params(C: int, rng) -> dict[str, Tensor]:
    p = {f"W{k}": Tensor(rng.normal(size=(C, C)) / np.sqrt(C), dtype=np.float32) for k in "qkvo"}
    p.update({f"b{k}": Tensor(np.zeros(C), dtype=np.float32) for k in "qkvo"})
    return p


def _time(fn, min_time: float) -> float:
    """Best of repeated runs, repeating until ``min_time`` seconds have been spent."""
    best, spent = np.inf, 0.0
    while spent < min_time or best == np.inf:
        t0 = time.perf_counter()
        fn()
        dt = time.perf_counter() - t0
        best, spent = min(best, dt), spent + dt
    return best


def loglog_slope(hw, seconds) -> float:
    return float(np.polyfit(np.log(np.asarray(hw, float)), np.log(np.asarray(seconds, float)), 1)[0])


def run_bench(sides, C: int, M: int, heads: int, min_time: float = 0.5, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    params = _bench_params(C, rng)
    rows = []
    for side in sides:
        x = Tensor(rng.normal(size=(1, side, side, C)), dtype=np.float32)
        t_w = _time(lambda: window_attention(window_partition(x, M), params, heads), min_time)
        t_g = _time(lambda: global_attention(x, params, heads), min_time)
        rows.append({"h": side, "w": side, "hw": side * side, "C": C, "M": M,
                     "msa_flops": flops_msa(side, side, C), "wmsa_flops": flops_wmsa(side, side, C, M),
                     "wmsa_seconds": t_w, "msa_seconds": t_g})
        log.info("bench %dx%d: W-MSA %.4fs, global %.4fs", side, side, t_w, t_g)
    hw = [r["hw"] for r in rows]
    return {
        "C": C, "M": M, "heads": heads, "backend": kernels.BACKEND, "rows": rows,
        "wmsa_slope": loglog_slope(hw, [r["wmsa_seconds"] for r in rows]) if len(rows) > 1 else None,
        "msa_slope": loglog_slope(hw, [r["msa_seconds"] for r in rows]) if len(rows) > 1 else None,
    }


def cmd_bench(args) -> int:
    try:
        sides = [int(s) for s in args.sizes.split(",")]
    except ValueError:
        raise UsageError(f"--sizes must be comma-separated integers, got '{args.sizes}'") from None
    if not sides or min(sides) < 1 or args.C < 1 or args.M < 1 or args.heads < 1:
        raise UsageError("sizes, C, M and heads must be positive")
    if any(s % args.M for s in sides):
        raise UsageError(f"every size must be a multiple of M={args.M}")
    if args.C % args.heads:
        raise UsageError(f"C={args.C} is not divisible by {args.heads} heads")
    report = run_bench(sides, args.C, args.M, args.heads, args.min_time, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "bench.json", report)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(report["rows"][0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(report["rows"])
    (out / "bench.csv").write_text(buf.getvalue())
    sys.stdout.write(buf.getvalue())
    print(f"slope wmsa {report['wmsa_slope']}, msa {report['msa_slope']}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _add_config_flags(p: argparse.ArgumentParser, ablation: bool = True) -> None:
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field (repeatable)")
    p.add_argument("--seed", type=int, help="run seed (overrides the config)")
    if ablation:
        p.add_argument("--no-clahe", action="store_true", help="skip CLAHE")
        p.add_argument("--no-crop", action="store_true", help="skip the circular crop")
        p.add_argument("--no-augment", action="store_true", help="train without rotation/flip augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swindr",
        description="Train and evaluate a shifted-window transformer on graded fundus images.",
        epilog="exit codes: 0 ok, 2 invalid arguments/config/layout, 3 unreadable image, "
               "4 non-finite loss, 5 parameter schema mismatch",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="render the synthetic 5-grade dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=300)
    p.add_argument("--image-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--corrupt", action="store_true", help="multiply in a strong illumination ramp")
    p.add_argument("--ratios", default="0.7,0.15,0.15", help="train,val,test fractions")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("preprocess", help="crop, resize and equalize a dataset tree")
    _add_config_flags(p)
    p.add_argument("--in", dest="input", required=True, help="dataset root (<split>/<grade>/<name>.png)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train and write params.bin, history.json, metrics.json")
    _add_config_flags(p)
    p.add_argument("--out", help="parent directory for run directories")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="print the per-grade table for one split")
    _add_config_flags(p)
    p.add_argument("--params", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--out", help="directory for metrics/confusion files (default: next to params)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time windowed against global attention")
    p.add_argument("--sizes", default="16,32,64,128", help="comma-separated map sides")
    p.add_argument("--C", type=int, default=32)
    p.add_argument("--M", type=int, default=4)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--min-time", type=float, default=0.5, help="seconds spent per measurement")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="bench")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
        logging.getLogger("swindr").addHandler(stream)
        logging.getLogger("swindr").setLevel(logging.INFO)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except UnreadableImage as exc:
        print(f"error: unreadable image: {exc}", file=sys.stderr)
        return EXIT_UNREADABLE
    except NonFiniteLoss as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except SchemaError as exc:
        print(f"error: {exc}", file=sys.stderr)
        for path in exc.paths:
            print(f"  {path}", file=sys.stderr)
        return EXIT_SCHEMA


if __name__ == "__main__":
    sys.exit(main())
