"""Loss, AdamW, the early-stopping training loop and evaluation metrics."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .model import ModelConfig, is_no_decay, model_logits
from .preprocess import AugmentPolicy, augment, balance_indices
from .tensor import Tensor, cross_entropy  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)


class NonFiniteLoss(FloatingPointError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 200
    early_stop_patience: int = 15
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    balance: bool = True
    grad_clip: float = 5.0

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.learning_rate <= 0 or self.batch_size < 1 or self.max_epochs < 1 or self.eps <= 0:
            raise ValueError("learning_rate, batch_size, max_epochs and eps must be positive")
        if not 1 <= self.early_stop_patience <= self.max_epochs:
            raise ValueError("early_stop_patience must be in 1..max_epochs")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0 (0 disables clipping)")
        if self.weight_decay < 0 or not all(0 <= b < 1 for b in self.betas):
            raise ValueError("weight_decay must be >= 0 and betas in [0, 1)")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


@dataclass
class TrainHistory:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)
    best_epoch: int = -1
    stop_reason: str = ""

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=1)


@dataclass
class Metrics:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    absent_classes: list[int]

    def to_dict(self) -> dict:
        return {
            "confusion": self.confusion.tolist(),
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "absent_classes": self.absent_classes,
            "support": self.confusion.sum(axis=1).tolist(),
        }

    def table(self) -> str:
        """Per-grade precision/recall/F1 rows and a macro 'Overall' row."""
        lines = [f"{'Class':<10}{'Precision':>10}{'Recall':>10}{'F1-Score':>10}"]
        for k in range(len(self.precision)):
            mark = " *" if k in self.absent_classes else ""
            lines.append(f"{'Grade ' + str(k):<10}{self.precision[k]:>10.2f}{self.recall[k]:>10.2f}{self.f1[k]:>10.2f}{mark}")
        lines.append(f"{'Overall':<10}{self.macro_precision:>10.2f}{self.macro_recall:>10.2f}{self.macro_f1:>10.2f}")
        lines.append(f"Accuracy: {self.accuracy:.4f}")
        if self.absent_classes:
            lines.append("* class absent from ground truth; recall reported as 0")
        return "\n".join(lines)

    def confusion_csv(self) -> str:
        K = self.confusion.shape[0]
        rows = ["true\\pred," + ",".join(str(k) for k in range(K))]
        rows += [f"{k}," + ",".join(str(int(v)) for v in self.confusion[k]) for k in range(K)]
        return "\n".join(rows) + "\n"


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)), 1)
    return conf


def metrics_from_confusion(conf: np.ndarray) -> Metrics:
    """Per-class precision/recall/F1 (0 where undefined) and macro averages."""
    conf = np.asarray(conf, dtype=np.int64)
    tp = np.diag(conf).astype(np.float64)
    pred = conf.sum(axis=0).astype(np.float64)
    true = conf.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, pred, out=np.zeros_like(tp), where=pred > 0)
    recall = np.divide(tp, true, out=np.zeros_like(tp), where=true > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    total = conf.sum()
    return Metrics(
        confusion=conf,
        precision=precision,
        recall=recall,
        f1=f1,
        accuracy=float(tp.sum() / total) if total else 0.0,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        absent_classes=[int(k) for k in np.flatnonzero(true == 0)],
    )


# ---------------------------------------------------------------- optimizer


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    """Scale all gradients together so their global L2 norm is at most ``max_norm``.

    Returns ``(grads, norm before clipping)``; ``max_norm == 0`` leaves them as is.
    """
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm <= 0 or norm <= max_norm:
        return grads, norm
    scale = max_norm / norm
    return {k: g * g.dtype.type(scale) for k, g in grads.items()}, norm


def adamw_init(params: dict[str, Tensor]) -> dict[str, dict[str, np.ndarray]]:
    return {
        "m": {k: np.zeros_like(v.data) for k, v in params.items()},
        "v": {k: np.zeros_like(v.data) for k, v in params.items()},
    }


def adamw_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state, t: int, cfg: TrainConfig):
    """One AdamW update with bias correction and decoupled weight decay.

    Decay is skipped for LayerNorm parameters and biases. Returns new
    ``(params, state)``; the inputs are not modified.
    """
    if set(grads) != set(params):
        raise KeyError(f"gradient keys do not match parameters: {sorted(set(grads) ^ set(params))}")
    if t < 1:
        raise ValueError("step index starts at 1")
    b1, b2 = cfg.betas
    lr, wd, eps = cfg.learning_rate, cfg.weight_decay, cfg.eps
    c1, c2 = 1.0 - b1**t, 1.0 - b2**t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k])
        theta = p.data
        dt = theta.dtype.type
        m = dt(b1) * state["m"][k] + dt(1.0 - b1) * g
        v = dt(b2) * state["v"][k] + dt(1.0 - b2) * (g * g)
        update = dt(lr) * (m / dt(c1)) / (np.sqrt(v / dt(c2)) + dt(eps))
        if wd and not is_no_decay(k):
            update = update + dt(lr * wd) * theta
        new_params[k] = Tensor(theta - update, requires_grad=True, dtype=theta.dtype)
        m_new[k], v_new[k] = m, v
    return new_params, {"m": m_new, "v": v_new}


# ------------------------------------------------------------------- data


def to_input(images: np.ndarray, dtype=np.float32) -> np.ndarray:
    """uint8 ``(B, H, W, 3)`` to floats in [-1, 1]."""
    dtype = np.dtype(dtype)
    return images.astype(dtype) / dtype.type(127.5) - dtype.type(1.0)


def predict_proba(images: np.ndarray, cfg: ModelConfig, params, batch_size: int = 64) -> np.ndarray:
    dtype = next(iter(params.values())).dtype
    out = []
    for i in range(0, len(images), batch_size):
        logits = model_logits(to_input(images[i : i + batch_size], dtype), cfg, params, train=False)
        out.append(T.softmax(logits, axis=-1).data)
    return np.concatenate(out) if out else np.zeros((0, cfg.num_classes))


def dataset_loss(images, labels, cfg: ModelConfig, params, batch_size: int = 64) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    probs = predict_proba(images, cfg, params, batch_size)
    labels = np.asarray(labels)
    p = np.maximum(probs[np.arange(len(labels)), labels].astype(np.float64), 1e-12)
    return float(-np.log(p).mean()), float((probs.argmax(axis=1) == labels).mean())


def evaluate(images, labels, cfg: ModelConfig, params, batch_size: int = 64) -> Metrics:
    """Argmax predictions, confusion matrix and derived per-class metrics."""
    if len(images) == 0:
        raise ValueError("cannot evaluate an empty split")
    pred = predict_proba(images, cfg, params, batch_size).argmax(axis=1)
    return metrics_from_confusion(confusion_matrix(labels, pred, cfg.num_classes))


# ------------------------------------------------------------------- loop


def loss_and_grads(batch_x: np.ndarray, batch_y: np.ndarray, cfg: ModelConfig, params, rng):
    with T.Tape() as tape:
        logits = model_logits(batch_x, cfg, params, train=True, rng=rng)
        loss = T.softmax_cross_entropy(logits, batch_y)
    keys = list(params)
    grads = dict(zip(keys, tape.gradients(loss, [params[k] for k in keys])))
    return loss.item(), grads


def train(
    cfg: ModelConfig,
    params: dict[str, Tensor],
    train_images: np.ndarray,
    train_labels: np.ndarray,
    val_images: np.ndarray,
    val_labels: np.ndarray,
    tcfg: TrainConfig,
    augment_policy: AugmentPolicy | None = None,
    val_fn: Callable[[dict[str, Tensor], int], tuple[float, float]] | None = None,
    on_epoch: Callable[[int, TrainHistory], None] | None = None,
):
    """Mini-batch AdamW with early stopping on validation loss.

    Returns ``(best_params, history)``. The best epoch is the first one with
    the minimal validation loss; training stops once ``early_stop_patience``
    epochs pass without improvement. ``augment_policy=None`` disables
    augmentation. ``val_fn`` replaces the validation pass (used by tests).
    """
    if len(train_images) == 0 or (val_fn is None and len(val_images) == 0):
        raise ValueError("train and val splits must be nonempty")
    train_labels = np.asarray(train_labels)
    history = TrainHistory()
    state = adamw_init(params)
    dtype = next(iter(params.values())).dtype
    step = 0
    best_params, best_loss, since_best = params, np.inf, 0
    base = np.random.default_rng([tcfg.seed, 0])
    order_src = balance_indices(train_labels, base) if tcfg.balance else np.arange(len(train_labels))

    for epoch in range(tcfg.max_epochs):
        ep_rng = np.random.default_rng([tcfg.seed, 1, epoch])
        order = ep_rng.permutation(order_src)
        drop_rng = np.random.default_rng([tcfg.seed, 2, epoch])
        total, seen, max_norm = 0.0, 0, 0.0
        for b, start in enumerate(range(0, len(order), tcfg.batch_size)):
            idx = order[start : start + tcfg.batch_size]
            imgs = train_images[idx]
            if augment_policy is not None:
                imgs = np.stack([
                    augment(im, np.random.default_rng([tcfg.seed, 3, epoch, start + j]), augment_policy)
                    for j, im in enumerate(imgs)
                ])
            loss, grads = loss_and_grads(to_input(imgs, dtype), train_labels[idx], cfg, params, drop_rng)
            if not np.isfinite(loss):
                raise NonFiniteLoss(epoch, b, loss)
            grads, gnorm = clip_grad_norm(grads, tcfg.grad_clip)
            max_norm = max(max_norm, gnorm)
            step += 1
            params, state = adamw_step(params, grads, state, step, tcfg)
            total += loss * len(idx)
            seen += len(idx)
        if val_fn is not None:
            vloss, vacc = val_fn(params, epoch)
        else:
            vloss, vacc = dataset_loss(val_images, val_labels, cfg, params)
        history.train_loss.append(total / seen)
        history.val_loss.append(vloss)
        history.val_accuracy.append(vacc)
        log.info("epoch %d train_loss %.4f val_loss %.4f val_acc %.4f max_grad_norm %.3g",
                 epoch, total / seen, vloss, vacc, max_norm)
        if vloss < best_loss:
            best_loss, best_params, since_best = vloss, params, 0
            history.best_epoch = epoch
        else:
            since_best += 1
        if on_epoch is not None:
            on_epoch(epoch, history)
        if since_best >= tcfg.early_stop_patience:
            history.stop_reason = f"early stop: no val loss improvement for {since_best} epochs"
            break
    else:
        history.stop_reason = "max_epochs reached"
    return best_params, history

