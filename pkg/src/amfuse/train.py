"""Training loop, schedule, augmentation, and mIoU evaluation.

Optimization is AdamW with decoupled weight decay, a constant 0.1x warmup for
the first epochs, and a poly(0.9) decay afterwards. Augmentation applies one
shared geometric transform (resize 0.5-2.0, horizontal flip, crop) to every
modality frame and the label map (nearest for labels), and photometric jitter
and gaussian blur to RGB only.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import report, scenes
from . import tensor as T
from .errors import ConfigurationError, DataError, UsageError
from .model import CMNeXtModel
from .tensor import Tensor

ADAM_BETAS = (0.9, 0.999)


@dataclass
class TrainConfig:
    lr: float = 6e-5
    eps: float = 1e-8
    weight_decay: float = 1e-2
    epochs: int = 30
    warmup_epochs: int = 10
    warmup_factor: float = 0.1
    poly_power: float = 0.9
    crop: int = 32
    seed: int = 0
    ignore_index: int = 255
    betas: tuple[float, float] = ADAM_BETAS
    ratio_range: tuple[float, float] = (0.5, 2.0)
    flip: bool = True
    jitter: bool = True
    blur: bool = True

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigurationError(
                f"warmup_epochs {self.warmup_epochs} must be < epochs {self.epochs}")
        if self.crop % 32:
            raise ConfigurationError(f"crop {self.crop} must be divisible by 32")
        self.betas = tuple(self.betas)
        self.ratio_range = tuple(self.ratio_range)

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"bad train config JSON: {exc}") from exc
        known = {f for f in cls.__dataclass_fields__}
        extra = set(raw) - known
        if extra:
            raise ConfigurationError(f"unknown train config fields: {sorted(extra)}")
        return cls(**raw)


# -- optimizer & schedule ----------------------------------------------------


def adamw_init(params) -> dict:
    return {"m": [np.zeros_like(p.data) for p in params],
            "v": [np.zeros_like(p.data) for p in params]}


def adamw_step(params, grads, state, t, lr_t, weight_decay=1e-2,
               betas=ADAM_BETAS, eps=1e-8) -> None:
    """In-place AdamW: decoupled decay first, then bias-corrected Adam."""
    if t < 1:
        raise UsageError(f"step index must be >= 1, got {t}")
    b1, b2 = betas
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.data.shape != np.shape(g):
            raise UsageError(
                f"param {i} shape {p.data.shape} != grad shape {np.shape(g)}")
        p.data -= lr_t * weight_decay * p.data
        state["m"][i] = b1 * state["m"][i] + (1 - b1) * g
        state["v"][i] = b2 * state["v"][i] + (1 - b2) * g * g
        m_hat = state["m"][i] / (1 - b1 ** t)
        v_hat = state["v"][i] / (1 - b2 ** t)
        p.data -= lr_t * m_hat / (np.sqrt(v_hat) + eps)


def poly_lr(epoch: int, iter_frac: float, cfg: TrainConfig) -> float:
    if not 0.0 <= iter_frac <= 1.0:
        raise UsageError(f"iter_frac must be in [0, 1], got {iter_frac}")
    if epoch < cfg.warmup_epochs:
        return cfg.warmup_factor * cfg.lr
    span = cfg.epochs - cfg.warmup_epochs
    progress = min(1.0, (epoch - cfg.warmup_epochs + iter_frac) / span)
    return cfg.lr * (1.0 - progress) ** cfg.poly_power


# -- loss --------------------------------------------------------------------


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = 255) -> Tensor:
    """Mean over non-ignored pixels of -log softmax(logits)[label]."""
    k, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (h, w):
        raise UsageError(f"labels shape {labels.shape} != spatial {(h, w)}")
    keep = labels != ignore_index
    bad = keep & ((labels < 0) | (labels >= k))
    if bad.any():
        y, x = np.unravel_index(int(np.argmax(bad)), labels.shape)
        raise DataError(f"label {labels[y, x]} out of range [0, {k}) at pixel ({y}, {x})")
    n = int(keep.sum())
    if n == 0:
        raise DataError("all pixels ignored; loss undefined")
    logp = T.log_softmax_lastdim(T.transpose(logits, (1, 2, 0)))
    pick = np.zeros((h, w, k))
    ys, xs = np.nonzero(keep)
    pick[ys, xs, labels[ys, xs]] = -1.0 / n
    return T.tsum(T.mul(logp, Tensor(pick)))


# -- augmentation ------------------------------------------------------------


def _resize(arr: np.ndarray, out_h: int, out_w: int, nearest: bool) -> np.ndarray:
    """Half-pixel-center resize; bilinear for frames, nearest for labels."""
    in_h, in_w = arr.shape[-2], arr.shape[-1]
    sy = (np.arange(out_h) + 0.5) * in_h / out_h - 0.5
    sx = (np.arange(out_w) + 0.5) * in_w / out_w - 0.5
    if nearest:
        yi = np.clip(np.rint(sy), 0, in_h - 1).astype(int)
        xi = np.clip(np.rint(sx), 0, in_w - 1).astype(int)
        return arr[..., yi, :][..., xi]
    y0 = np.clip(np.floor(sy), 0, in_h - 1).astype(int)
    x0 = np.clip(np.floor(sx), 0, in_w - 1).astype(int)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = np.clip(sy - y0, 0.0, 1.0)[:, None]
    wx = np.clip(sx - x0, 0.0, 1.0)[None, :]
    a = arr[..., y0, :][..., x0]
    b = arr[..., y0, :][..., x1]
    c = arr[..., y1, :][..., x0]
    d = arr[..., y1, :][..., x1]
    return (a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx
            + c * wy * (1 - wx) + d * wy * wx)


def hflip_sample(sample: dict) -> dict:
    return {key: val[..., ::-1].copy() for key, val in sample.items()}


def augment(sample: dict, seed: int, cfg: TrainConfig) -> dict:
    """One shared geometric transform for all keys; photometrics on 'rgb' only."""
    rng = np.random.default_rng(seed)
    in_size = sample["label"].shape[0]
    lo, hi = cfg.ratio_range
    ratio = float(rng.uniform(lo, hi))
    new = max(cfg.crop, int(round(in_size * ratio)))
    out = {key: _resize(val, new, new, nearest=(key == "label"))
           for key, val in sample.items()}
    if cfg.flip and rng.random() < 0.5:
        out = hflip_sample(out)
    if new > cfg.crop:
        top = int(rng.integers(0, new - cfg.crop + 1))
        left = int(rng.integers(0, new - cfg.crop + 1))
    else:
        top = left = 0
    out = {key: val[..., top:top + cfg.crop, left:left + cfg.crop].copy()
           for key, val in out.items()}
    if "rgb" in out:
        rgb = out["rgb"]
        if cfg.jitter:
            gains = rng.uniform(0.8, 1.2, size=(3, 1, 1))
            rgb = np.clip(rgb * gains, 0.0, 1.0)
        if cfg.blur and rng.random() < 0.5:
            sigma = float(rng.uniform(0.1, 1.0))
            rgb = np.stack([ndimage.gaussian_filter(ch, sigma) for ch in rgb])
        out["rgb"] = rgb
    return out


# -- metrics -----------------------------------------------------------------


class ConfusionMatrix:
    def __init__(self, num_classes: int, ignore_index: int = 255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, truth: np.ndarray) -> None:
        pred = np.asarray(pred).ravel()
        truth = np.asarray(truth).ravel()
        if pred.shape != truth.shape:
            raise UsageError(f"pred size {pred.shape} != truth size {truth.shape}")
        keep = truth != self.ignore_index
        pred, truth = pred[keep], truth[keep]
        for name, arr in (("truth", truth), ("pred", pred)):
            bad = (arr < 0) | (arr >= self.num_classes)
            if bad.any():
                i = int(np.argmax(bad))
                raise DataError(f"{name} class {arr[i]} outside [0, {self.num_classes})")
        np.add.at(self.counts, (truth, pred), 1)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise UsageError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self


def miou(cm: ConfusionMatrix) -> dict:
    """Per-class IoU and the mean over classes with a nonzero denominator."""
    if cm.counts.sum() == 0:
        raise DataError("empty confusion matrix; mIoU undefined")
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0) - tp
    fn = cm.counts.sum(axis=1) - tp
    denom = tp + fp + fn
    valid = denom > 0
    iou = np.full(cm.num_classes, np.nan)
    iou[valid] = tp[valid] / denom[valid]
    return {"per_class_iou": iou, "mean": float(iou[valid].mean()),
            "valid_classes": np.nonzero(valid)[0].tolist()}


# -- loops -------------------------------------------------------------------


def _forward_loss(model: CMNeXtModel, sample: dict, ignore_index: int) -> Tensor:
    frames = [Tensor(sample[m]) for m in model.config.modalities]
    logits = model.forward(frames)
    return cross_entropy(logits, sample["label"], ignore_index)


def fit_samples(model: CMNeXtModel, samples, steps: int, lr: float,
                weight_decay: float = 0.0, callback=None) -> list[float]:
    """Plain fixed-LR AdamW loop over an in-memory list of samples."""
    if not samples:
        raise UsageError("no samples to fit")
    params = model.parameters()
    state = adamw_init(params)
    losses = []
    for t in range(1, steps + 1):
        sample = samples[(t - 1) % len(samples)]
        model.zero_grad()
        loss = _forward_loss(model, sample, ignore_index=255)
        loss.backward()
        adamw_step(params, [p.grad for p in params], state, t, lr,
                   weight_decay=weight_decay)
        losses.append(loss.item())
        if callback is not None:
            callback(t, losses[-1])
    return losses


def predict(model: CMNeXtModel, sample: dict) -> np.ndarray:
    with T.no_grad():
        frames = [Tensor(sample[m]) for m in model.config.modalities]
        logits = model.forward(frames)
    return np.argmax(logits.data, axis=0)


def train(model: CMNeXtModel, data_root, cfg: TrainConfig, out_dir) -> list[dict]:
    """Epoch loop over a generated split; writes metrics.jsonl, weights.nnz,
    and a loss-curve figure under out_dir."""
    manifest = scenes.load_manifest(data_root)
    entries = manifest["splits"].get("train", [])
    if not entries:
        raise UsageError(f"no training samples under {data_root}")
    val_entries = manifest["splits"].get("val", [])
    os.makedirs(out_dir, exist_ok=True)
    params = model.parameters()
    state = adamw_init(params)
    rng = np.random.default_rng(cfg.seed)
    raw = [scenes.load_sample(data_root, e, manifest) for e in entries]
    log, losses, lrs = [], [], []
    t = 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(raw))
        epoch_losses = []
        for j, idx in enumerate(order):
            t += 1
            lr_t = poly_lr(epoch, j / len(order), cfg)
            sample = augment(raw[idx], int(rng.integers(0, 2 ** 31)), cfg)
            model.zero_grad()
            loss = _forward_loss(model, sample, cfg.ignore_index)
            loss.backward()
            adamw_step(params, [p.grad for p in params], state, t, lr_t,
                       weight_decay=cfg.weight_decay, betas=cfg.betas, eps=cfg.eps)
            epoch_losses.append(loss.item())
        entry = {"epoch": epoch, "loss": float(np.mean(epoch_losses)),
                 "lr": poly_lr(epoch, 0.0, cfg)}
        if val_entries:
            cm = ConfusionMatrix(model.config.num_classes, cfg.ignore_index)
            for e in val_entries:
                s = scenes.load_sample(data_root, e, manifest)
                cm.update(predict(model, s), s["label"])
            entry["val_miou"] = miou(cm)["mean"]
        log.append(entry)
        losses.append(entry["loss"])
        lrs.append(entry["lr"])
        with open(os.path.join(out_dir, "metrics.jsonl"), "a") as fh:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    model.save(os.path.join(out_dir, "weights.nnz"))
    report.save_loss_curve(os.path.join(out_dir, "loss_curve.png"), losses, lrs)
    return log


def evaluate(model: CMNeXtModel, data_root, split: str = "val",
             out_dir=None) -> dict:
    """Per-corruption-group mIoU over a split; 'clean' plus each variant tag."""
    manifest = scenes.load_manifest(data_root)
    entries = manifest["splits"].get(split, [])
    if not entries:
        raise UsageError(f"no {split!r} samples under {data_root}")
    tags = [None] + list(manifest["corruptions"])
    groups = {}
    for tag in tags:
        cm = ConfusionMatrix(model.config.num_classes)
        for e in entries:
            sample = scenes.load_sample(data_root, e, manifest, variant=tag)
            cm.update(predict(model, sample), sample["label"])
        groups["clean" if tag is None else tag] = miou(cm)["mean"]
    result = {"groups": groups, "mean": float(np.mean(list(groups.values())))}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        header = ["group", "miou"]
        rows = [[k, v] for k, v in groups.items()] + [["mean", result["mean"]]]
        report.write_csv(os.path.join(out_dir, "eval.csv"), header, rows)
        report.save_miou_bars(os.path.join(out_dir, "eval_miou.png"),
                              {**groups, "mean": result["mean"]})
    return result
