"""SGD training loop, learning-rate schedule and synthetic data."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from treenet import ops
from treenet.layers import BatchNorm2d, Module
from treenet.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 256
    base_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    warmup_epochs: float = 5
    decay_interval: float = 30
    decay_factor: float = 0.1
    seed: int = 0
    flip: bool = False

    def __post_init__(self):
        for name in ("base_lr", "momentum", "weight_decay", "warmup_epochs", "decay_factor"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.epochs <= 0 or self.batch_size <= 0 or self.decay_interval <= 0:
            raise ValueError("epochs, batch_size and decay_interval must be positive")
        if self.warmup_epochs >= self.epochs:
            raise ValueError("warm-up must be shorter than training")


def desk_config(**overrides) -> TrainConfig:
    """Small-scale recipe: same shape as the ImageNet one, compressed to 20 epochs."""
    base = dict(epochs=20, batch_size=32, base_lr=0.1, momentum=0.9, weight_decay=1e-4,
                warmup_epochs=2, decay_interval=10, decay_factor=0.1, seed=0)
    base.update(overrides)
    return TrainConfig(**base)


def lr_at(config: TrainConfig, epoch: float) -> float:
    """Linear warm-up from 0, then step decay every ``decay_interval`` epochs.

    The warm-up counts towards the first interval, so with the ImageNet
    defaults the rate drops at epochs 30, 60 and 90.
    """
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    if epoch < config.warmup_epochs:
        return config.base_lr * epoch / config.warmup_epochs
    return config.base_lr * config.decay_factor ** math.floor(epoch / config.decay_interval)


# --------------------------------------------------------------------------
# optimizer


def sgd_step(params: list, grads: list, state: dict, config: TrainConfig, lr: Optional[float] = None) -> list:
    """Momentum SGD with coupled weight decay, in place.

    v <- momentum * v + grad + wd * param ;  param <- param - lr * v.
    Parameters flagged ``no_decay`` (BN affine terms, biases) skip decay.
    """
    lr = config.base_lr if lr is None else lr
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    for p, g in zip(params, grads):
        if g is None:
            raise ValueError(f"missing gradient for parameter {p.name or p.shape}")
        d = g if (p.no_decay or config.weight_decay == 0) else g + config.weight_decay * p.data
        v = state.get(id(p))
        if v is None or config.momentum == 0:
            v = d.astype(p.dtype, copy=True)
        else:
            v *= config.momentum
            v += d
        state[id(p)] = v
        p.data = p.data - lr * v
    return params


# --------------------------------------------------------------------------
# data


@dataclass(frozen=True)
class DataConfig:
    """Synthetic dataset recipe; ``val_seed`` draws the held-out split."""

    classes: int = 4
    per_class: int = 32
    size: int = 64
    seed: int = 7
    val_seed: int = 8
    val_per_class: int = 32
    signal: float = 3.0
    noise: float = 1.0
    template_seed: int = 0

    def make(self, split: str = "train") -> "SyntheticDataset":
        if split == "train":
            seed, per_class = self.seed, self.per_class
        else:
            seed, per_class = self.val_seed, self.val_per_class
        return make_synthetic(self.classes, per_class, self.size, seed, self.signal, self.noise, self.template_seed)


@dataclass
class SyntheticDataset:
    images: np.ndarray
    labels: np.ndarray
    classes: int
    seed: int

    def __len__(self) -> int:
        return len(self.labels)


def class_templates(classes: int, size: int, template_seed: int = 0) -> np.ndarray:
    """One Gaussian blob per class, with its own position and colour."""
    rng = np.random.default_rng(template_seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    sigma = size / 8
    out = np.empty((classes, 3, size, size))
    for c in range(classes):
        cy, cx = rng.uniform(0.25 * size, 0.75 * size, size=2)
        colour = rng.standard_normal(3)
        colour /= np.linalg.norm(colour)
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        out[c] = colour[:, None, None] * blob
    return out


def make_synthetic(
    classes: int,
    per_class: int,
    size: int = 64,
    seed: int = 0,
    signal: float = 3.0,
    noise: float = 1.0,
    template_seed: int = 0,
) -> SyntheticDataset:
    """Class-conditional blob images plus white noise, reproducible from ``seed``.

    Templates depend only on ``template_seed`` so train/validation splits drawn
    with different ``seed`` values share the same classes.
    """
    if classes < 1 or per_class < 1:
        raise ValueError("need at least one class and one sample per class")
    rng = np.random.default_rng(seed)
    tmpl = class_templates(classes, size, template_seed)
    labels = np.repeat(np.arange(classes), per_class)
    rng.shuffle(labels)
    amp = rng.uniform(0.8, 1.2, size=(len(labels), 1, 1, 1))
    imgs = signal * amp * tmpl[labels] + noise * rng.standard_normal((len(labels), 3, size, size))
    return SyntheticDataset(imgs.astype(np.float32), labels.astype(np.int64), classes, seed)


# --------------------------------------------------------------------------
# loop


def _topk_hits(logits: np.ndarray, labels: np.ndarray, k: int) -> int:
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return int((top == labels[:, None]).any(axis=1).sum())


def _bn_buffers(model: Module) -> list:
    return [(m, m.running_mean.copy(), m.running_var.copy()) for _, m in model.named_modules() if isinstance(m, BatchNorm2d)]


def evaluate(model: Module, dataset: SyntheticDataset, batch_size: int = 64, batch_stats: bool = False) -> dict:
    """Loss and top-1/top-5 accuracy.

    Runs with BN in eval mode unless ``batch_stats`` is set, in which case
    batch statistics are used and running buffers are restored afterwards.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    was_training = model.training
    saved = _bn_buffers(model) if batch_stats else None
    model.train(batch_stats)
    loss_sum, hit1, hit5 = 0.0, 0, 0
    try:
        with no_grad():
            for start in range(0, len(dataset), batch_size):
                x = dataset.images[start : start + batch_size]
                y = dataset.labels[start : start + batch_size]
                logits = model(Tensor(x, dtype=x.dtype))
                loss, _ = ops.softmax_cross_entropy(logits, y)
                loss_sum += float(loss.data) * len(y)
                hit1 += _topk_hits(logits.data, y, 1)
                hit5 += _topk_hits(logits.data, y, 5)
    finally:
        if saved:
            for m, rm, rv in saved:
                m.running_mean[...] = rm
                m.running_var[...] = rv
        model.train(was_training)
    n = len(dataset)
    return {"loss": loss_sum / n, "top1": hit1 / n, "top5": hit5 / n}


def train(
    model: Module,
    dataset: SyntheticDataset,
    config: TrainConfig,
    val: Optional[SyntheticDataset] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
) -> list:
    """Run ``config.epochs`` epochs of minibatch SGD; returns per-epoch metrics.

    ``loss``/``top1``/``top5`` are running averages over the epoch's training
    batches.  A trailing batch of one sample is skipped (BN cannot normalize it).
    """
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    params = model.parameters()
    state: dict = {}
    steps_per_epoch = math.ceil(n / config.batch_size)
    history = []
    for epoch in range(config.epochs):
        model.train()
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        flip_rng = np.random.default_rng([config.seed, epoch, 1])
        loss_sum, hit1, hit5, seen = 0.0, 0, 0, 0
        lr = lr_at(config, epoch)
        for step in range(steps_per_epoch):
            idx = order[step * config.batch_size : (step + 1) * config.batch_size]
            if len(idx) < 2:
                continue
            x = dataset.images[idx]
            if config.flip:
                mask = flip_rng.random(len(idx)) < 0.5
                x = np.where(mask[:, None, None, None], x[..., ::-1], x)
            y = dataset.labels[idx]
            lr = lr_at(config, epoch + step / steps_per_epoch)
            logits = model(Tensor(np.ascontiguousarray(x), dtype=x.dtype))
            loss, _ = ops.softmax_cross_entropy(logits, y)
            model.zero_grad()
            loss.backward()
            sgd_step(params, [p.grad for p in params], state, config, lr)
            loss_sum += float(loss.data) * len(idx)
            hit1 += _topk_hits(logits.data, y, 1)
            hit5 += _topk_hits(logits.data, y, 5)
            seen += len(idx)
        rec = {"epoch": epoch + 1, "lr": lr, "loss": loss_sum / max(seen, 1), "top1": hit1 / max(seen, 1), "top5": hit5 / max(seen, 1)}
        if val is not None:
            vm = evaluate(model, val, config.batch_size)
            rec.update(val_loss=vm["loss"], val_top1=vm["top1"], val_top5=vm["top5"])
        log.info("epoch %d lr %.4g loss %.4f top1 %.3f", rec["epoch"], lr, rec["loss"], rec["top1"])
        history.append(rec)
        if on_epoch:
            on_epoch(rec)
    return history


def history_to_csv(history: list) -> str:
    cols = ["epoch", "lr", "loss", "top1", "top5"]
    extra = [c for c in ("val_loss", "val_top1", "val_top5") if history and c in history[0]]
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\r\n")
    wr.writerow(cols + extra)
    for rec in history:
        wr.writerow([repr(rec[c]) if isinstance(rec[c], float) else rec[c] for c in cols + extra])
    return buf.getvalue()


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
