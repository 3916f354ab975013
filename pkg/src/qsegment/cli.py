"""Command-line front end: summary, train, quantize, infer, eval, bench.

Exit codes: 0 success, 2 usage error, 3 I/O error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as D
from .metrics import dice_between, evaluate
from .model import build_model, forward_float, layer_table, mac_count
from .qsm import QSMError, estimate_int8_size, load_model, save_model, to_bytes
from .quant import QuantizationError, forward_quantized, quantize_pipeline
from .tensor import sigmoid
from .train import TrainConfig, config_dict, train

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("qsegment")


class UsageError(Exception):
    pass


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise argparse.ArgumentTypeError(f"size must be positive, got {text!r}")
    return h, w


def _need_div8(size) -> None:
    if size[0] % 8 or size[1] % 8:
        raise UsageError(f"size {size[0]}x{size[1]} is not divisible by 8")


# ---------------------------------------------------------------------------
# config resolution: defaults < config file < explicit flags

RUN_DEFAULTS = {
    "model": None,
    "out": None,
    "data": None,
    "synthetic": False,
    "size": [64, 64],
    "threshold": 0.5,
    "quantized": False,
    "n_train": D.CHASE_TRAIN,
    "n_val": D.CHASE_VAL,
    "calib_count": 8,
    "eval_every": 1,
}

# flag dest -> config key
_FLAG_KEYS = {"steps": "max_steps", "lr": "lr0", "batch_size": "batch_size", "epochs": "epochs", "seed": "seed"}


def resolve_config(args) -> dict:
    cfg = dict(RUN_DEFAULTS)
    cfg.update(config_dict(TrainConfig()))
    if getattr(args, "config", None):
        try:
            loaded = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key in RUN_DEFAULTS:
        val = getattr(args, key, None)
        if val is not None and val is not False:
            cfg[key] = val
    for dest, key in _FLAG_KEYS.items():
        val = getattr(args, dest, None)
        if val is not None:
            cfg[key] = val
    cfg["size"] = list(cfg["size"])
    for key in ("model", "out", "data"):
        if cfg[key] is not None:
            cfg[key] = str(cfg[key])
    return cfg


def train_config(cfg: dict) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    try:
        return TrainConfig(**{k: v for k, v in cfg.items() if k in names})
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from exc


def dataset(cfg: dict) -> D.DatasetIndex:
    size = tuple(cfg["size"])
    _need_div8(size)
    if cfg["synthetic"]:
        return D.synthetic_index(cfg["seed"], cfg["n_train"], cfg["n_val"], size)
    if cfg["data"]:
        return D.load_chase(cfg["data"], size)
    raise UsageError("give --data DIR or --synthetic")


def _model_or_default(cfg: dict):
    if cfg["model"]:
        return load_model(cfg["model"])
    return build_model(cfg["seed"], tuple(cfg["widths"]))


def _check_mode(model, cfg: dict) -> None:
    if cfg["quantized"] and not model.is_quantized:
        raise UsageError("--quantized given but the model file holds a float model")
    if model.is_quantized and not cfg["quantized"]:
        raise UsageError("model file is quantized; pass --quantized")


def _forward(model, x: np.ndarray, quantized: bool) -> np.ndarray:
    return forward_quantized(model, x) if quantized else forward_float(model, x)


def _emit(text: str, out) -> None:
    if out:
        Path(out).write_text(text)
    print(text, end="" if text.endswith("\n") else "\n")


# ---------------------------------------------------------------------------
# verbs


def cmd_summary(cfg: dict) -> int:
    model = _model_or_default(cfg)
    h, w = cfg["size"]
    _need_div8((h, w))
    rows = layer_table(model, h, w)
    lines = [f"{'idx':>3}  {'kind':<18} {'c_in':>5} {'c_out':>5}  {'output':<14} {'params':>8} {'MACs':>11}"]
    for r in rows:
        shape = "x".join(str(v) for v in r["out_shape"])
        lines.append(f"{r['index']:>3}  {r['kind']:<18} {r['c_in']:>5} {r['c_out']:>5}  {shape:<14} {r['params']:>8} {r['macs']:>11}")
    float_size = len(to_bytes(model)) if not model.is_quantized else None
    lines += [
        f"parameters: {model.parameter_count()}",
        f"MACs at {h}x{w}: {mac_count(model, h, w)}",
        f"float QSM size: {float_size if float_size is not None else 'n/a'} bytes",
        f"int8 QSM size (estimate): {estimate_int8_size(model)} bytes",
    ]
    _emit("\n".join(lines) + "\n", cfg["out"])
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    if not cfg["out"]:
        raise UsageError("train needs --out DIR")
    tc = train_config(cfg)
    data = dataset(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train.log"
    # the log starts with the resolved configuration
    log_path.write_text(json.dumps({"config": cfg}, sort_keys=True) + "\n")
    result = train(tc, data, log_path, eval_every=cfg["eval_every"])
    save_model(result.model, out / "final.qsm")
    save_model(result.best, out / "best.qsm")
    first, last = result.log[0]["loss"], result.log[-1]["loss"]
    summary = {"summary": {"steps": result.log[-1]["step"], "first_loss": first, "final_loss": last,
                           "loss_drop": 1.0 - last / first, "best_val_dice": result.best_dice}}
    with open(log_path, "a") as fh:
        fh.write(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary["summary"]))
    return EXIT_OK


def _calibration_images(cfg: dict) -> np.ndarray:
    samples = dataset(cfg).train_samples()[: cfg["calib_count"]]
    if not samples:
        raise UsageError("no calibration images")
    return D.batch(samples)[0]


def agreement(float_model, quant_model, images: np.ndarray) -> dict:
    lf = forward_float(float_model, images)
    lq = forward_quantized(quant_model, images)
    return {"mean_abs_dlogit": float(np.mean(np.abs(lf - lq))),
            "mask_dice": dice_between(lq >= 0, (lf >= 0).astype(np.float64))}


def cmd_quantize(cfg: dict) -> int:
    if not cfg["model"] or not cfg["out"]:
        raise UsageError("quantize needs --model FILE and --out FILE")
    model = load_model(cfg["model"])
    if model.is_quantized:
        raise UsageError("model is already quantized")
    x = _calibration_images(cfg)
    q = quantize_pipeline(model, x)
    size = save_model(q, cfg["out"])
    stats = {"size_bytes": size, "n_calib": int(len(x))}
    stats.update(agreement(model, q, x))
    print(json.dumps(stats))
    return EXIT_OK


def read_image(path) -> np.ndarray:
    try:
        img = Image.open(path).convert("RGB")
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc
    return np.asarray(img, dtype=np.float32).transpose(2, 0, 1) / 255.0


def pad_to_multiple(x: np.ndarray, k: int = 8) -> np.ndarray:
    """Edge-replicate the bottom/right so both spatial dims divide by ``k``."""
    h, w = x.shape[-2:]
    ph, pw = -h % k, -w % k
    if not (ph or pw):
        return x
    return np.pad(x, [(0, 0)] * (x.ndim - 2) + [(0, ph), (0, pw)], mode="edge")


def predict_image(model, image: np.ndarray, quantized: bool) -> np.ndarray:
    h, w = image.shape[1:]
    logits = _forward(model, pad_to_multiple(image)[None], quantized)
    return sigmoid(logits[0, 0, :h, :w].astype(np.float64))


def cmd_infer(cfg: dict, image_path: str, raw: bool) -> int:
    if not cfg["model"] or not cfg["out"]:
        raise UsageError("infer needs --model FILE and --out DIR")
    model = load_model(cfg["model"])
    _check_mode(model, cfg)
    probs = predict_image(model, read_image(image_path), cfg["quantized"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(image_path).stem
    Image.fromarray(np.round(probs * 255).astype(np.uint8), "L").save(out / f"{stem}_prob.png")
    Image.fromarray(np.where(probs >= cfg["threshold"], 255, 0).astype(np.uint8), "L").save(out / f"{stem}_mask.png")
    if raw:
        np.save(out / f"{stem}_prob.npy", probs)
    print(json.dumps({"image": str(image_path), "height": probs.shape[0], "width": probs.shape[1],
                      "foreground": float(np.mean(probs >= cfg["threshold"]))}))
    return EXIT_OK


def cmd_eval(cfg: dict, self_check: bool) -> int:
    if not cfg["model"]:
        raise UsageError("eval needs --model FILE")
    model = load_model(cfg["model"])
    _check_mode(model, cfg)
    val = dataset(cfg).val_samples()
    if not val:
        raise UsageError("validation split is empty")
    x, y = D.batch(val)
    probs = np.concatenate([sigmoid(_forward(model, x[i : i + 8], cfg["quantized"]).astype(np.float64))
                            for i in range(0, len(x), 8)])
    if self_check:
        # gt replaced by the model's own thresholded output
        y = (probs >= cfg["threshold"]).astype(np.float64)
    report = evaluate(probs, y, cfg["threshold"])
    _emit(report.to_json() + "\n", cfg["out"])
    return EXIT_OK


BENCH_COLUMNS = ("mode", "h", "w", "iters", "mean_ms", "p50_ms", "p95_ms", "mac_count")


def bench_rows(model, size, iters: int, modes) -> list[dict]:
    h, w = size
    x = np.random.default_rng(0).random((1, model.in_channels, h, w)).astype(np.float32)
    macs = mac_count(model, h, w)
    rows = []
    for mode in modes:
        _forward(model, x, mode == "quantized")  # warmup
        times = []
        for _ in range(iters):
            t0 = time.perf_counter()
            _forward(model, x, mode == "quantized")
            times.append((time.perf_counter() - t0) * 1e3)
        t = np.array(times)
        rows.append({"mode": mode, "h": h, "w": w, "iters": iters, "mean_ms": round(float(t.mean()), 4),
                     "p50_ms": round(float(np.percentile(t, 50)), 4),
                     "p95_ms": round(float(np.percentile(t, 95)), 4), "mac_count": macs})
    return rows


def cmd_bench(cfg: dict, iters: int) -> int:
    if iters < 1:
        raise UsageError("--iters must be >= 1")
    size = tuple(cfg["size"])
    _need_div8(size)
    model = _model_or_default(cfg)
    modes = ["quantized"] if cfg["quantized"] else ["float"]
    if cfg["quantized"] and not model.is_quantized:
        raise UsageError("--quantized given but the model holds no quantization records")
    rows = bench_rows(model, size, iters, modes)
    fh = open(cfg["out"], "w", newline="") if cfg["out"] else sys.stdout
    try:
        writer = csv.DictWriter(fh, BENCH_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if fh is not sys.stdout:
            fh.close()
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--model", help="QSM model file")
    common.add_argument("--out", help="output file or directory")
    common.add_argument("--data", help="CHASE_DB1 directory")
    common.add_argument("--synthetic", action="store_true", help="use the synthetic vessel set")
    common.add_argument("--seed", type=int)
    common.add_argument("--size", type=parse_size, help="HxW, divisible by 8")
    common.add_argument("--threshold", type=float)
    common.add_argument("--quantized", action="store_true", help="run the int8 engine")
    common.add_argument("--config", help="JSON file with defaults for any option")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="qsegment", description="vessel segmentation with a float and an int8 engine")
    sub = p.add_subparsers(dest="verb", required=True)
    sub.add_parser("summary", parents=[common], help="layer table, parameter count, sizes")
    t = sub.add_parser("train", parents=[common], help="train and write best/final checkpoints")
    t.add_argument("--steps", type=int, help="stop after this many SGD steps")
    t.add_argument("--lr", type=float, help="initial learning rate")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    sub.add_parser("quantize", parents=[common], help="fold, calibrate and quantize a float model")
    i = sub.add_parser("infer", parents=[common], help="probability and mask PNGs for one image")
    i.add_argument("image")
    i.add_argument("--raw", action="store_true", help="also save float probabilities as .npy")
    e = sub.add_parser("eval", parents=[common], help="metric report over the validation split")
    e.add_argument("--self-check", action="store_true", help="use the model's own masks as ground truth")
    b = sub.add_parser("bench", parents=[common], help="host latency CSV")
    b.add_argument("--iters", type=int, default=10)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if args.verb == "summary":
            return cmd_summary(cfg)
        if args.verb == "train":
            return cmd_train(cfg)
        if args.verb == "quantize":
            return cmd_quantize(cfg)
        if args.verb == "infer":
            return cmd_infer(cfg, args.image, args.raw)
        if args.verb == "eval":
            return cmd_eval(cfg, args.self_check)
        return cmd_bench(cfg, args.iters)
    except UsageError as exc:
        print(f"qsegment: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except QSMError as exc:
        print(f"qsegment: bad model file: {exc}", file=sys.stderr)
        return EXIT_IO
    except (QuantizationError, ArithmeticError) as exc:
        print(f"qsegment: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"qsegment: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"qsegment: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
