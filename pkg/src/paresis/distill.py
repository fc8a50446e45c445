"""Fusion knowledge-distillation objective and the joint training loop."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .ndiff import log_softmax_t, softmax_t
from .models import ModelBundle

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
SUB_NETWORKS = ("tcn", "lstm")


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int, batch: int, value: float):
        super().__init__(f"non-finite loss {value} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch = epoch, batch


@dataclass
class TrainConfig:
    temperature: float = 4.0
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 20
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    fkd_t2_scaling: bool = False
    soft_ce: bool = False

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class LossBreakdown:
    fusion_ce: float
    ce: list[float]
    fkd: list[float]
    total: float

    def as_record(self) -> dict:
        rec = {"fusion_ce": self.fusion_ce, "total": self.total}
        for name, ce, fkd in zip(SUB_NETWORKS, self.ce, self.fkd):
            rec[f"{name}_ce"] = ce
            rec[f"{name}_fkd"] = fkd
        return rec


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------

def _check_distribution(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
        raise ValueError(f"{name} is not a probability distribution")
    return p


def fkd_loss(teacher, student):
    """KL(teacher || student) summed over classes; batched over leading axes.

    Zero-probability teacher entries contribute nothing.
    """
    teacher = _check_distribution(teacher, "teacher")
    student = _check_distribution(student, "student")
    if teacher.shape != student.shape:
        raise ValueError(f"fkd_loss: arity mismatch {teacher.shape} vs {student.shape}")
    s = np.maximum(student, PROB_FLOOR)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(teacher > 0, teacher * (np.log(teacher) - np.log(s)), 0.0)
    return np.maximum(terms.sum(axis=-1), 0.0)


def _as_onehot(truth, n):
    truth = np.asarray(truth)
    if truth.ndim >= 1 and truth.shape[-1] == n and truth.dtype.kind == "f":
        if not (np.all((truth == 0) | (truth == 1)) and np.all(truth.sum(axis=-1) == 1)):
            raise ValueError("truth is not one-hot")
        return truth
    idx = truth.astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= n):
        raise ValueError(f"class index out of range [0, {n})")
    return np.eye(n)[idx]


def cross_entropy(truth, probs):
    """``-sum(y * ln p)`` with the probability floored at 1e-12.

    ``truth`` is a one-hot array (float) or an array of class indices.
    """
    probs = _check_distribution(probs, "probs")
    y = _as_onehot(truth, probs.shape[-1])
    return -(y * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=-1)


def _ce_from_logits(logits, y, temperature):
    logp = np.maximum(log_softmax_t(logits, temperature), np.log(PROB_FLOOR))
    loss = -(y * logp).sum(axis=-1)
    grad = (softmax_t(logits, temperature) - y) / temperature
    return loss, grad


def _fkd_from_logits(teacher_logits, student_logits, temperature, t2_scaling):
    pt = softmax_t(teacher_logits, temperature)
    logpt = log_softmax_t(teacher_logits, temperature)
    logps = log_softmax_t(student_logits, temperature)
    loss = np.maximum((pt * (logpt - logps)).sum(axis=-1), 0.0)
    # teacher is a constant target: no gradient returned for it
    grad = (softmax_t(student_logits, temperature) - pt) / temperature
    if t2_scaling:
        loss, grad = loss * temperature ** 2, grad * temperature ** 2
    return loss, grad


def loss_and_grads(logits: dict, truth, temperature: float = 4.0, *,
                   soft_ce: bool = False, fkd_t2_scaling: bool = False,
                   use_fkd: bool = True):
    """Total objective over the heads present in ``logits``.

    With a ``fusion`` head: fusion CE plus, for each sub-network, its CE and
    its KL divergence from the (detached) fusion distribution. Without one,
    only the CE of whichever sub-networks are present. Every term is a batch
    mean. Returns ``(LossBreakdown, dlogits)``.
    """
    some = next(iter(logits.values()))
    batch, n = some.shape
    y = _as_onehot(truth, n)
    sub_t = temperature if soft_ce else 1.0
    dlogits, ce, fkd = {}, [0.0, 0.0], [0.0, 0.0]
    fusion_ce = 0.0
    if "fusion" in logits:
        loss, grad = _ce_from_logits(logits["fusion"], y, 1.0)
        fusion_ce = float(loss.mean())
        dlogits["fusion"] = grad / batch
    for m, name in enumerate(SUB_NETWORKS):
        if name not in logits:
            continue
        loss, grad = _ce_from_logits(logits[name], y, sub_t)
        ce[m] = float(loss.mean())
        dlogits[name] = grad / batch
        if "fusion" in logits and use_fkd:
            loss, grad = _fkd_from_logits(logits["fusion"], logits[name], temperature, fkd_t2_scaling)
            fkd[m] = float(loss.mean())
            dlogits[name] = dlogits[name] + grad / batch
    total = fusion_ce + sum(f + c for f, c in zip(fkd, ce))
    return LossBreakdown(fusion_ce, ce, fkd, total), dlogits


def total_loss(batch_logits: dict, truth, temperature: float = 4.0, **kwargs) -> LossBreakdown:
    return loss_and_grads(batch_logits, truth, temperature, **kwargs)[0]


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig) -> None:
    """Bias-corrected adaptive-moment update, applied in place."""
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name in sorted(grads):
        g = grads[name]
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"adam_step: grad {name} has shape {g.shape}, param {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def accuracy(bundle: ModelBundle, X, y) -> float:
    if len(X) == 0:
        return float("nan")
    pred = bundle.predict_logits(X).argmax(axis=1)
    return float(np.mean(pred == np.asarray(y)))


def train(bundle: ModelBundle, X_train, y_train, X_val=None, y_val=None,
          cfg: TrainConfig | None = None, use_fkd: bool = True):
    """Jointly optimize every head of ``bundle`` on integer labels.

    The parameters with the best validation accuracy (earliest on ties) are
    restored at the end; without validation data the final epoch is kept.
    Returns ``(bundle, history)`` where history has one dict per epoch.
    """
    cfg = cfg or TrainConfig()
    X_train = np.asarray(X_train, dtype=np.float64)
    y_train = np.asarray(y_train, dtype=np.int64)
    if len(X_train) == 0:
        raise ValueError("empty training set")
    if y_train.max() >= bundle.n_classes or y_train.min() < 0:
        raise ValueError(f"labels outside [0, {bundle.n_classes})")
    has_val = X_val is not None and len(X_val) > 0
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history = []
    best = (-1.0, None)
    n = len(X_train)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        n_batches = 0
        for b, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            logits, cache = bundle.forward(X_train[idx], train=True)
            parts, dlogits = loss_and_grads(
                logits, y_train[idx], cfg.temperature, soft_ce=cfg.soft_ce,
                fkd_t2_scaling=cfg.fkd_t2_scaling, use_fkd=use_fkd)
            if not np.isfinite(parts.total):
                raise TrainingDiverged(epoch, b, parts.total)
            grads, _ = bundle.backward(cache, dlogits)
            adam_step(bundle.params, grads, state, cfg)
            for k, v in parts.as_record().items():
                sums[k] = sums.get(k, 0.0) + v
            n_batches += 1
        record = {"epoch": epoch}
        record.update({k: v / n_batches for k, v in sums.items()})
        record["val_accuracy"] = accuracy(bundle, X_val, y_val) if has_val else float("nan")
        history.append(record)
        logger.info("epoch %d loss %.4f val_acc %.4f", epoch, record["total"], record["val_accuracy"])
        if has_val and record["val_accuracy"] > best[0]:
            best = (record["val_accuracy"], bundle.snapshot())
    if best[1] is not None:
        bundle.restore(best[1])
    return bundle, history


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
