"""SGD training with cosine warm restarts."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as D
from .autodiff import Tape
from .loss import DEFAULT_LAMBDA, LossOutput, loss_and_grad, weight_map
from .metrics import confusion, dice_accuracy
from .model import ModelGraph, build_model, forward_float, forward_tape
from .tensor import sigmoid

log = logging.getLogger(__name__)


class NonFiniteError(ArithmeticError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 4000
    lr0: float = 1e-3
    restart_period: int = 20
    eta_min: float = 0.0
    seed: int = 0
    lam: float = DEFAULT_LAMBDA
    max_steps: int | None = None
    augment: bool = True
    brightness: float = 0.2
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    max_rotation: float = 1.0
    widths: tuple = (16, 32, 64)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr0 <= 0:
            raise ValueError("lr0 must be positive")
        if self.restart_period < 1:
            raise ValueError("restart_period must be >= 1")
        self.widths = tuple(self.widths)


def lr_schedule(epoch: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr0 to eta_min, restarting every ``restart_period`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    t = epoch % cfg.restart_period
    if t == 0:
        return cfg.lr0
    return cfg.eta_min + (cfg.lr0 - cfg.eta_min) * (1 + math.cos(math.pi * t / cfg.restart_period)) / 2


def sgd_step(params: dict, grads: dict, lr: float) -> dict:
    """Plain SGD: ``theta - lr * g`` for every named parameter."""
    out = {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name}")
        out[name] = p if lr == 0 else (p - lr * g).astype(p.dtype)
    return out


def backward(model: ModelGraph, images: np.ndarray, masks: np.ndarray, lam: float = DEFAULT_LAMBDA,
             weights=None) -> tuple[LossOutput, dict]:
    """Loss and d(total)/d(parameter) for one batch, using the model's BN mode."""
    tape = Tape()
    logits = forward_tape(model, images, tape)
    out, dlogits = loss_and_grad(logits.value, masks, lam, weights)
    grads = tape.backward(logits, dlogits)
    return out, grads


def predict_probs(model: ModelGraph, images: np.ndarray, chunk: int = 8) -> np.ndarray:
    parts = [sigmoid(forward_float(model, images[i : i + chunk])) for i in range(0, len(images), chunk)]
    return np.concatenate(parts)


def val_dice(model: ModelGraph, samples: list, threshold: float = 0.5) -> float:
    if not samples:
        return float("nan")
    x, y = D.batch(samples)
    model.set_mode("eval")
    return dice_accuracy(confusion(predict_probs(model, x), y, threshold))[0]


@dataclass
class TrainResult:
    model: ModelGraph
    best: ModelGraph
    best_dice: float
    log: list = field(default_factory=list)


def _fmt(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False)


def train(cfg: TrainConfig, data: D.DatasetIndex, log_path=None, eval_every: int = 1) -> TrainResult:
    """Seeded training loop; returns the final and best-validation models.

    One log record per evaluated epoch: epoch, step, lr, mean loss, val Dice.
    """
    train_set = data.train_samples()
    if not train_set:
        raise ValueError("empty training split")
    val_set = data.val_samples()
    rng = np.random.default_rng(cfg.seed)
    model = build_model(cfg.seed, cfg.widths, train_set[0].image.shape[0])
    best, best_dice = model.copy(), -1.0
    records = []
    fh = open(log_path, "a") if log_path else None
    weight_cache = {}
    step = 0
    try:
        for epoch in range(cfg.epochs):
            if cfg.max_steps is not None and step >= cfg.max_steps:
                break
            lr = lr_schedule(epoch, cfg)
            order = rng.permutation(len(train_set))
            losses = []
            for start in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                chosen = [train_set[i] for i in order[start : start + cfg.batch_size]]
                if cfg.augment:
                    chosen = [D.augment(s, rng, cfg.brightness, cfg.p_hflip, cfg.p_vflip, cfg.max_rotation) for s in chosen]
                    weights = None
                else:
                    key = tuple(order[start : start + cfg.batch_size])
                    if key not in weight_cache:
                        weight_cache[key] = weight_map(D.batch(chosen)[1], cfg.lam)
                    weights = weight_cache[key]
                x, y = D.batch(chosen)
                model.set_mode("train")
                out, grads = backward(model, x, y, cfg.lam, weights)
                if not math.isfinite(out.total):
                    raise NonFiniteError(f"non-finite loss at step {step}")
                model.set_parameters(sgd_step(model.named_parameters(), grads, lr))
                losses.append(out.total)
                step += 1
            last = (cfg.max_steps is not None and step >= cfg.max_steps) or epoch == cfg.epochs - 1
            if (epoch + 1) % eval_every and not last:
                continue
            vd = val_dice(model, val_set)
            rec = {"epoch": epoch, "step": step, "lr": lr, "loss": float(np.mean(losses)), "val_dice": vd}
            records.append(rec)
            if fh:
                fh.write(_fmt(rec) + "\n")
            log.debug("epoch %d step %d loss %.5f val_dice %.4f", epoch, step, rec["loss"], vd)
            if vd > best_dice:
                best, best_dice = model.copy(), vd
    finally:
        if fh:
            fh.close()
    model.set_mode("eval")
    best.set_mode("eval")
    return TrainResult(model, best, best_dice, records)


def config_dict(cfg: TrainConfig) -> dict:
    d = asdict(cfg)
    d["widths"] = list(cfg.widths)
    return d
