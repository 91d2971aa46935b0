"""Training loop (batch size 1, Adam, early stopping) and gradient checking."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as mdl
from . import numerics as nx
from .errors import NumericError
from .metrics import UndefinedAUCError, accuracy, roc_auc_multiclass
from .ssd import SsdBlockConfig


class DivergenceError(NumericError):
    def __init__(self, epoch, bag_id, loss):
        super().__init__(f"non-finite loss {loss} at epoch {epoch}, bag {bag_id!r}")
        self.epoch = epoch
        self.bag_id = bag_id


def cross_entropy(logits, label: int):
    """``(loss, dlogits)`` for one sample, log-sum-exp stabilized."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[0]:
        raise ValueError(f"label {label} out of range for {logits.shape[0]} classes")
    z = logits - logits.max()
    lse = np.log(np.sum(np.exp(z)))
    loss = float(lse - z[label])
    d = np.exp(z - lse)
    d[label] -= 1.0
    return loss, d


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch_size: int = 1
    max_epochs: int = 20
    patience: int = 10
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        if self.batch_size != 1:
            raise ValueError("only batch_size == 1 is supported")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.max_epochs < 0 or self.patience < 1:
            raise ValueError("max_epochs must be >= 0 and patience >= 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    loss: float
    val_auc: float
    val_acc: float
    seconds: float


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    best_epoch: int | None = None

    def __len__(self):
        return len(self.records)

    @property
    def losses(self):
        return [r.loss for r in self.records]

    def to_csv(self, timing: bool = True) -> str:
        """CSV text. ``timing=False`` writes 0 for seconds so that seeded runs
        produce identical files."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "loss", "val_auc", "val_acc", "seconds"])
        for r in self.records:
            w.writerow([r.epoch, repr(r.loss), repr(r.val_auc), repr(r.val_acc),
                        f"{r.seconds if timing else 0.0:.3f}"])
        return buf.getvalue()


def evaluate(params, config, bags):
    """``(auc, acc, probas)`` over ``bags``; auc is NaN when undefined."""
    if not bags:
        return float("nan"), float("nan"), np.zeros((0, config.num_classes))
    probas = np.array([mdl.predict_proba(b, params, config) for b in bags])
    labels = np.array([b.label for b in bags])
    try:
        auc = roc_auc_multiclass(probas, labels)
    except UndefinedAUCError:
        auc = float("nan")
    return auc, accuracy(probas, labels), probas


def _clip(grads, max_norm):
    total = np.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm:
        return grads
    scale = max_norm / total
    return {k: g * scale for k, g in grads.items()}


def train_step(params, moments, t, bag, config, lr, grad_clip=None):
    """Forward, backward and one Adam update on a single bag."""
    art = mdl.forward(bag, params, config)
    loss, dlogits = cross_entropy(art.logits, bag.label)
    grads, _ = mdl.backward(art, dlogits, params)
    if grad_clip is not None:
        grads = _clip(grads, grad_clip)
    params, moments = nx.adam_step(params, grads, moments, t, lr=lr)
    return params, moments, loss


def train(params, config, train_bags, val_bags, tcfg: TrainConfig, on_epoch=None):
    """Returns ``(best_params, log)``.

    The kept snapshot is the one with the best validation AUC (accuracy when
    AUC is undefined); with no validation bags the last epoch wins.
    """
    if not train_bags:
        raise ValueError("training set is empty")
    rng = np.random.default_rng(tcfg.seed)
    params = {k: v.copy() for k, v in params.items()}
    best = params
    best_score = -np.inf
    stale = 0
    moments: dict = {}
    t = 0
    log = TrainLog()
    for epoch in range(tcfg.max_epochs):
        start = time.perf_counter()
        losses = []
        for i in rng.permutation(len(train_bags)):
            bag = train_bags[i]
            t += 1
            try:
                params, moments, loss = train_step(params, moments, t, bag, config,
                                                   tcfg.lr, tcfg.grad_clip)
            except NumericError as exc:
                raise DivergenceError(epoch, bag.bag_id, str(exc)) from exc
            if not np.isfinite(loss):
                raise DivergenceError(epoch, bag.bag_id, loss)
            losses.append(loss)
        val_auc, val_acc, _ = evaluate(params, config, val_bags)
        log.records.append(EpochRecord(epoch, float(np.mean(losses)), val_auc, val_acc,
                                       time.perf_counter() - start))
        if on_epoch is not None:
            on_epoch(log.records[-1])
        if not val_bags:
            best, log.best_epoch = params, epoch
            continue
        score = val_auc if np.isfinite(val_auc) else val_acc
        if score > best_score:
            best, best_score, log.best_epoch, stale = params, score, epoch, 0
        else:
            stale += 1
            if stale >= tcfg.patience:
                break
    return {k: v.copy() for k, v in best.items()}, log


# -- gradient check -----------------------------------------------------------------

TINY_CONFIG = mdl.ModelConfig(
    input_dim=4, reduced_dim=4, num_classes=2,
    ssd=SsdBlockConfig(depth=1, heads=2, state_dim=2, conv_kernel=2, chunk=2),
    selection_hidden=2, mlp_hidden=4,
)


def tensor_rel_error(analytic, numeric, floor=1e-12) -> float:
    """``max|a - n| / max(max|a|, max|n|, floor)`` over one tensor."""
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic), initial=0.0), np.max(np.abs(numeric), initial=0.0), floor)
    return float(diff / scale)


def numeric_gradient(loss_fn, params, name, step=1e-5):
    p = params[name]
    g = np.zeros_like(p)
    flat = p.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = loss_fn(params)
        flat[i] = orig - step
        down = loss_fn(params)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


@dataclass
class GradCheckReport:
    errors: dict
    tolerance: float

    @property
    def failures(self):
        return [k for k, e in self.errors.items() if not e < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0


def gradient_check(config=None, tolerance=1e-5, seed=0, params=None, bag_size=3, step=1e-5):
    """Compare analytic and central-difference gradients on one random bag."""
    config = config or TINY_CONFIG
    if mdl.count_params(config) >= 5000:
        raise ValueError("gradient_check is meant for configs with < 5000 parameters")
    rng = np.random.default_rng(seed)
    if params is None:
        params = mdl.init_params(config, seed)
        # push every tensor off its special init so no gradient is trivially zero
        params = {k: v + 0.1 * rng.standard_normal(v.shape) for k, v in params.items()}
    params = {k: v.copy() for k, v in params.items()}
    feats = rng.uniform(-2.0, 2.0, size=(bag_size, config.input_dim))
    label = int(rng.integers(config.num_classes))

    def loss_fn(p):
        return cross_entropy(mdl.forward(feats, p, config).logits, label)[0]

    art = mdl.forward(feats, params, config)
    _, dlogits = cross_entropy(art.logits, label)
    grads, _ = mdl.backward(art, dlogits, params)
    errors = {name: tensor_rel_error(grads[name], numeric_gradient(loss_fn, params, name, step))
              for name in params}
    return GradCheckReport(errors, tolerance)
