"""Loss, optimizers, learning-rate schedule, metrics, toy data and the training loop."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn as F
from .layers import BatchNorm2d
from .tensor import NonFiniteError, Tensor, backward, mul, no_grad, scale, sum_all

log = logging.getLogger(__name__)

IGNORE_LABEL = 255


# ---------------------------------------------------------------------------
# loss


def _label_array(labels):
    lab = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if lab.ndim == 3:
        lab = lab[:, None]
    return lab.astype(np.int64)


def ohem_select(p_true, valid, thresh, min_kept):
    """Boolean mask of kept pixels.

    Pixels with true-class probability below ``thresh`` are kept; when fewer
    than ``min_kept`` qualify, the ``min_kept`` lowest-probability valid
    pixels are kept instead (ties resolved by flat index). ``thresh >= 1``
    keeps every valid pixel.
    """
    valid = valid.astype(bool)
    if thresh >= 1.0:
        return valid.copy()
    kept = valid & (p_true < thresh)
    min_kept = min(int(min_kept), int(valid.sum()))
    if kept.sum() < min_kept:
        flat_p = np.where(valid, p_true, np.inf).ravel()
        order = np.argsort(flat_p, kind="stable")[:min_kept]
        kept = np.zeros(valid.size, dtype=bool)
        kept[order] = True
        kept = kept.reshape(valid.shape)
    return kept


def ce_ohem_loss(logits: Tensor, labels, thresh=0.7, min_kept=None, ignore_label=IGNORE_LABEL,
                 return_mask=False):
    """Cross-entropy averaged over online-mined hard pixels.

    ``labels`` is (N, 1, H, W) or (N, H, W) with class ids or ``ignore_label``.
    ``min_kept`` defaults to 1/16 of the valid pixels.
    """
    n, k, h, w = logits.shape
    lab = _label_array(labels)
    if lab.shape != (n, 1, h, w):
        raise ValueError(f"labels shape {lab.shape} does not match logits {logits.shape}")
    valid = lab != ignore_label
    bad = valid & ((lab < 0) | (lab >= k))
    if bad.any():
        raise ValueError(f"label {int(lab[bad][0])} out of range for {k} classes")
    if not valid.any():
        raise ValueError("no valid pixels: every label is ignore_label")
    if min_kept is None:
        min_kept = int(valid.sum()) // 16
    logp = F.log_softmax_channels(logits)
    safe = np.where(valid, lab, 0)
    p_true = np.exp(np.take_along_axis(logp.data, safe, axis=1))
    kept = ohem_select(p_true, valid, thresh, min_kept)
    mask = np.zeros(logits.shape, dtype=logits.dtype)
    np.put_along_axis(mask, safe, kept.astype(logits.dtype), axis=1)
    loss = scale(sum_all(mul(logp, Tensor(mask))), -1.0 / int(kept.sum()))
    return (loss, kept) if return_mask else loss


def cross_entropy(logits: Tensor, labels, ignore_label=IGNORE_LABEL):
    return ce_ohem_loss(logits, labels, thresh=1.0, ignore_label=ignore_label)


# ---------------------------------------------------------------------------
# optimizers


def _decays(name):
    return not name.endswith((".gamma", ".beta"))


class Optimizer:
    kind = ""

    def __init__(self, named_params, weight_decay):
        self.named_params = list(named_params)
        self.weight_decay = weight_decay
        self.buffers = {}

    def _grad(self, name, p):
        if p.grad is None:
            raise ValueError(f"missing gradient for parameter {name!r}")
        g = p.grad
        if self.weight_decay and _decays(name):
            g = g + self.weight_decay * p.data
        return g

    def zero_grad(self):
        for _, p in self.named_params:
            p.grad = None


class SGD(Optimizer):
    """Heavy-ball momentum with L2 decay: ``v = mu*v + g + wd*w; w -= lr*v``."""

    kind = "sgd_momentum"

    def __init__(self, named_params, momentum=0.9, weight_decay=1e-4):
        super().__init__(named_params, weight_decay)
        self.momentum = momentum
        self.buffers = {name: np.zeros_like(p.data) for name, p in self.named_params}

    def step(self, lr):
        grads = [self._grad(name, p) for name, p in self.named_params]
        for (name, p), g in zip(self.named_params, grads):
            v = self.buffers[name]
            v *= self.momentum
            v += g
            p.data -= p.data.dtype.type(lr) * v


class Adam(Optimizer):
    """Bias-corrected Adam; decay enters as ``wd*w`` added to the gradient (classic L2 form)."""

    kind = "adam"

    def __init__(self, named_params, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=2e-4):
        super().__init__(named_params, weight_decay)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.buffers = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in self.named_params}

    def step(self, lr):
        grads = [self._grad(name, p) for name, p in self.named_params]
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for (name, p), g in zip(self.named_params, grads):
            m, v = self.buffers[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype)


def make_optimizer(kind, named_params, weight_decay=None, momentum=0.9):
    if kind == "sgd":
        return SGD(named_params, momentum, 1e-4 if weight_decay is None else weight_decay)
    if kind == "adam":
        return Adam(named_params, beta1=momentum, weight_decay=2e-4 if weight_decay is None else weight_decay)
    raise ValueError(f"unknown optimizer {kind!r}")


def step(optimizer: Optimizer, lr):
    optimizer.step(lr)


# ---------------------------------------------------------------------------
# schedule


@dataclass(frozen=True)
class PolySchedule:
    lr_initial: float
    max_iteration: int
    power: float = 0.9

    def __call__(self, iteration):
        return poly_lr(self, iteration)


def poly_lr(schedule: PolySchedule, iteration):
    if not 0 <= iteration <= schedule.max_iteration:
        raise ValueError(f"iteration {iteration} outside [0, {schedule.max_iteration}]")
    return schedule.lr_initial * (1 - iteration / schedule.max_iteration) ** schedule.power


# ---------------------------------------------------------------------------
# metrics


class ConfusionMatrix:
    """Entry (i, j) counts pixels with ground truth i predicted as j."""

    def __init__(self, num_classes, ignore_label=IGNORE_LABEL):
        self.num_classes = num_classes
        self.ignore_label = ignore_label
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred, gt):
        pred = np.asarray(pred).ravel().astype(np.int64)
        gt = np.asarray(gt).ravel().astype(np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
        keep = gt != self.ignore_label
        pred, gt = pred[keep], gt[keep]
        k = self.num_classes
        if ((gt < 0) | (gt >= k)).any() or ((pred < 0) | (pred >= k)).any():
            raise ValueError(f"label outside [0, {k})")
        self.counts += np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix"):
        self.counts += other.counts
        return self

    @property
    def total(self):
        return int(self.counts.sum())

    def pixel_accuracy(self):
        if self.total == 0:
            raise ValueError("empty matrix")
        return float(np.trace(self.counts) / self.total)

    def iou(self):
        """Per-class IoU; classes with an empty union get NaN."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)


def accumulate(cm: ConfusionMatrix, pred_labels, gt_labels):
    cm.accumulate(pred_labels, gt_labels)


def miou(cm: ConfusionMatrix):
    """(per-class IoU list, mean over classes with a non-empty union)."""
    if cm.total == 0:
        raise ValueError("empty matrix")
    per_class = cm.iou()
    defined = per_class[~np.isnan(per_class)]
    # fsum is exactly rounded, so the mean cannot depend on class order
    return per_class.tolist(), math.fsum(defined) / len(defined)


# ---------------------------------------------------------------------------
# toy data

TOY_COLORS = np.array([
    (0.10, 0.10, 0.10), (0.90, 0.20, 0.20), (0.20, 0.80, 0.20), (0.20, 0.30, 0.90),
    (0.90, 0.90, 0.20), (0.80, 0.30, 0.80), (0.20, 0.80, 0.80), (0.95, 0.60, 0.20),
], dtype=np.float32)


def _paint_toy_label(rng, h, w, k):
    label = np.zeros((h, w), dtype=np.uint8)
    grid = 4
    for cls in range(1, k):
        shape = rng.integers(3)
        if shape == 0:  # rectangle
            rh = int(rng.integers(h // 8, h // 2 + 1)) // grid * grid
            rw = int(rng.integers(w // 8, w // 2 + 1)) // grid * grid
            y = int(rng.integers(0, (h - rh) // grid + 1)) * grid
            x = int(rng.integers(0, (w - rw) // grid + 1)) * grid
            label[y:y + rh, x:x + rw] = cls
        elif shape == 1:  # horizontal stripe
            t = max(grid, int(rng.integers(h // 16, h // 4 + 1)) // grid * grid)
            y = int(rng.integers(0, (h - t) // grid + 1)) * grid
            label[y:y + t, :] = cls
        else:  # vertical stripe
            t = max(grid, int(rng.integers(w // 16, w // 4 + 1)) // grid * grid)
            x = int(rng.integers(0, (w - t) // grid + 1)) * grid
            label[:, x:x + t] = cls
    return label


def make_toy_dataset(seed, n_images=8, size=(64, 128), num_classes=4, noise=0.05, min_fraction=0.05):
    """Images of flat-coloured rectangles and stripes with their per-pixel class maps.

    Returns a list of ``(image (3,H,W) float32 in [0,1], label (H,W) uint8)``.
    Every class covers at least ``min_fraction`` of every image; region edges
    sit on a 4-pixel grid.
    """
    h, w = size
    if h % 8 or w % 8:
        raise ValueError(f"toy image size {h}x{w} must be divisible by 8")
    if not 2 <= num_classes <= len(TOY_COLORS):
        raise ValueError(f"num_classes must be in [2, {len(TOY_COLORS)}]")
    rng = np.random.Generator(np.random.PCG64(seed))
    data = []
    while len(data) < n_images:
        label = _paint_toy_label(rng, h, w, num_classes)
        # later regions occlude earlier ones; a sliver of a class says little about it
        if np.bincount(label.ravel(), minlength=num_classes).min() < min_fraction * h * w:
            continue
        img = TOY_COLORS[label].transpose(2, 0, 1)
        img = img + rng.normal(0.0, noise, size=img.shape).astype(np.float32)
        data.append((np.clip(img, 0.0, 1.0).astype(np.float32), label))
    return data


def stack_batch(samples, normalize=False):
    images = np.stack([img for img, _ in samples]).astype(np.float32)
    if normalize:
        images = (images - 0.5) / 0.5
    labels = np.stack([lab for _, lab in samples])[:, None].astype(np.int64)
    return Tensor(images), labels


# ---------------------------------------------------------------------------
# training loop


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 300
    batch_size: int = 4
    optimizer: str = "sgd"
    lr: float = None
    weight_decay: float = None
    momentum: float = 0.9
    ohem_thresh: float = 0.7
    min_kept_fraction: float = 1 / 16
    eval_every: int = 50
    normalize: bool = False
    recalibrate_bn: bool = True
    seed: int = 0

    @property
    def lr_initial(self):
        if self.lr is not None:
            return self.lr
        return 4.5e-2 if self.optimizer == "sgd" else 1e-3


@dataclass
class HistoryRow:
    iteration: int
    loss: float
    lr: float
    pixel_acc: float = math.nan
    miou: float = math.nan


@dataclass
class History:
    rows: list = field(default_factory=list)

    def __iter__(self):
        return iter(self.rows)

    def __len__(self):
        return len(self.rows)

    @property
    def last_eval(self):
        for r in reversed(self.rows):
            if not math.isnan(r.pixel_acc):
                return r
        return None

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "lr", "pixel_acc", "miou"])
            for r in self.rows:
                w.writerow([r.iteration, repr(r.loss), repr(r.lr),
                            "" if math.isnan(r.pixel_acc) else repr(r.pixel_acc),
                            "" if math.isnan(r.miou) else repr(r.miou)])


def read_history_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(HistoryRow(int(rec["iteration"]), float(rec["loss"]), float(rec["lr"]),
                                   float(rec["pixel_acc"] or "nan"), float(rec["miou"] or "nan")))
    return History(rows)


def recalibrate_bn(graph, dataset, batch_size=None, normalize=False):
    """Set every batch-norm running statistic to its population value over ``dataset``.

    Each batch runs in training mode with momentum 1, so a norm's buffers hold
    that batch's mean and biased variance; these are pooled with the law of
    total variance. Parameters are untouched.

    ``batch_size=None`` pushes the whole dataset through at once. That is the
    exact fixed point: every norm then sees inputs produced by upstream norms
    that already use population statistics, so eval-mode outputs equal the
    full-batch training-mode outputs. Smaller batches bound memory but are
    only exact for the first norm.
    """
    bns = [m for _, m in graph.root.named_modules() if isinstance(m, BatchNorm2d)]
    saved = [bn.momentum for bn in bns]
    sums = [[0.0, 0.0] for _ in bns]
    total = 0
    try:
        with no_grad():
            for bn in bns:
                bn.momentum = 1.0
            step = batch_size or len(dataset)
            for start in range(0, len(dataset), step):
                images, _ = stack_batch(dataset[start:start + step], normalize)
                graph.forward(images, training=True, check_shape=False)
                weight = images.shape[0] * images.shape[2] * images.shape[3]
                total += weight
                for acc, bn in zip(sums, bns):
                    mu = bn.running_mean.astype(np.float64)
                    acc[0] = acc[0] + weight * mu
                    acc[1] = acc[1] + weight * (bn.running_var.astype(np.float64) + mu * mu)
    finally:
        for bn, m in zip(bns, saved):
            bn.momentum = m
    for (s1, s2), bn in zip(sums, bns):
        mean = s1 / total
        bn.running_mean[...] = mean
        bn.running_var[...] = np.maximum(s2 / total - mean * mean, 0.0)


def evaluate(graph, dataset, num_classes, batch_size=4, normalize=False):
    """Eval-mode pixel accuracy, mIoU and the confusion matrix over ``dataset``."""
    cm = ConfusionMatrix(num_classes)
    with no_grad():
        for start in range(0, len(dataset), batch_size):
            images, labels = stack_batch(dataset[start:start + batch_size], normalize)
            logits = graph.forward(images, training=False, check_shape=False)
            cm.accumulate(logits.data.argmax(axis=1), labels[:, 0])
    return cm.pixel_accuracy(), miou(cm)[1], cm


def train_loop(graph, dataset, config: TrainConfig = None, callback=None) -> History:
    """Poly-scheduled minibatch training on ``dataset``; returns the per-iteration history."""
    cfg = config or TrainConfig()
    k = graph.config.num_classes
    opt = make_optimizer(cfg.optimizer, list(graph.named_parameters()), cfg.weight_decay, cfg.momentum)
    schedule = PolySchedule(cfg.lr_initial, cfg.iterations)
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    order = []
    history = History()
    for it in range(cfg.iterations):
        if len(order) < cfg.batch_size:
            order.extend(rng.permutation(len(dataset)).tolist())
        batch_idx, order = order[:cfg.batch_size], order[cfg.batch_size:]
        images, labels = stack_batch([dataset[i] for i in batch_idx], cfg.normalize)
        lr = schedule(it)
        try:
            logits = graph.forward(images, training=True, check_shape=False)
            n_valid = int((labels != IGNORE_LABEL).sum())
            loss = ce_ohem_loss(logits, labels, cfg.ohem_thresh, int(n_valid * cfg.min_kept_fraction))
        except NonFiniteError as exc:
            raise TrainingDivergedError(f"non-finite values at iteration {it}: {exc}") from exc
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDivergedError(f"loss is {value} at iteration {it}")
        opt.zero_grad()
        backward(loss)
        opt.step(lr)
        row = HistoryRow(it, value, lr)
        if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
            if cfg.recalibrate_bn:
                recalibrate_bn(graph, dataset, None, cfg.normalize)
            row.pixel_acc, row.miou, _ = evaluate(graph, dataset, k, cfg.batch_size, cfg.normalize)
            log.info("iter %d loss %.4f lr %.5f acc %.4f miou %.4f", it, value, lr, row.pixel_acc, row.miou)
        history.rows.append(row)
        if callback is not None:
            callback(row)
    return history
