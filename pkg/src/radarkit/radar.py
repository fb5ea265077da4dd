"""Training loops: clean classifier, PGD-trained detector, RADAR finetuning.

The detector is always trained by *descending* the mean BCE over a mixed
batch of ``B`` benign and ``B`` adversarial inputs (benign = 0, adv = 1). The
classifier is only ever read; its parameters are never written here.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import diffcore as dc
from .attacks import AttackConfig, run_attack
from .data import Dataset, batches
from .diffcore import NonFiniteError, Tape, Tensor
from .metrics import accuracy, roc_auc_scores
from .nets import Model, detect_scores

log = logging.getLogger(__name__)

BEN, ADV = 0.0, 1.0


class TrainingDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-4
    schedule: str = "cosine"  # "cosine" | "plateau" | "constant"
    t_max: int = 10
    patience: int = 3
    factor: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.schedule not in ("cosine", "plateau", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def with_(self, **kw) -> "TrainConfig":
        return replace(self, **kw)


@dataclass
class TrainLog:
    rows: list[tuple[int, str, str, float]] = field(default_factory=list)
    epochs: int = 0

    def add(self, epoch: int, split: str, metric: str, value: float) -> None:
        self.rows.append((epoch, split, metric, float(value)))

    def series(self, split: str, metric: str) -> list[float]:
        return [v for _, s, m, v in self.rows if s == split and m == metric]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("epoch", "split", "metric", "value"))
            for e, s, m, v in self.rows:
                w.writerow((e, s, m, repr(v)))


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.params.items():
            if p.grad is None:
                continue
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * p.grad
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * p.grad ** 2
            if self.lr:
                p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.grad = None


class Scheduler:
    """Cosine annealing over ``t_max`` epochs, or reduce-on-plateau."""

    def __init__(self, opt: Adam, cfg: TrainConfig):
        self.opt, self.cfg = opt, cfg
        self.base = opt.lr
        self.epoch = 0
        self.best = math.inf
        self.bad = 0

    def step(self, val_loss: float) -> None:
        self.epoch += 1
        cfg = self.cfg
        if cfg.schedule == "cosine":
            self.opt.lr = 0.5 * self.base * (1 + math.cos(math.pi * self.epoch / cfg.t_max))
        elif cfg.schedule == "plateau":
            if val_loss < self.best:
                self.best, self.bad = val_loss, 0
            else:
                self.bad += 1
                if self.bad >= cfg.patience:
                    self.opt.lr *= cfg.factor
                    self.bad = 0


def _sgd_step(model: Model, opt: Adam, loss_fn, where: str) -> float:
    try:
        with Tape() as tape:
            loss = loss_fn()
        dc.backward(tape, loss)
    except NonFiniteError as exc:
        raise TrainingDivergedError(f"non-finite loss/gradient at {where}: {exc}") from exc
    opt.step()
    return loss.item()


def _mixed_bce(g: Model, x_ben: np.ndarray, x_adv: np.ndarray) -> Tensor:
    xm = np.concatenate([x_ben, x_adv])
    ym = np.concatenate([np.full(len(x_ben), BEN), np.full(len(x_adv), ADV)])
    return dc.bce_with_logits(g.forward(Tensor(xm)), ym)


def detector_eval(g: Model, x_ben: np.ndarray, x_adv: np.ndarray) -> tuple[float, float]:
    """(mean BCE over the mixed set, ROC-AUC) with ``g`` in eval mode."""
    g.eval()
    sb, sa = detect_scores(g, x_ben), detect_scores(g, x_adv)
    p = np.clip(np.concatenate([sb, sa]), dc.BCE_CLAMP, 1 - dc.BCE_CLAMP)
    t = np.concatenate([np.zeros(len(sb)), np.ones(len(sa))])
    bce = float(np.mean(-(t * np.log(p) + (1 - t) * np.log1p(-p))))
    return bce, roc_auc_scores(sb, sa)


def _batch_losses(f: Model, x: np.ndarray, y: np.ndarray, bs: int = 256) -> tuple[float, float]:
    tot, preds = 0.0, []
    for s in range(0, len(y), bs):
        logits = f.forward(Tensor(x[s:s + bs])).data
        tot += float(-dc.log_softmax(logits)[np.arange(len(logits)), y[s:s + bs]].sum())
        preds.append(np.argmax(logits, axis=1))
    return tot / len(y), accuracy(np.concatenate(preds), y)


def train_clean(f: Model, data: tuple[Dataset, Dataset], cfg: TrainConfig) -> tuple[Model, TrainLog]:
    """Mini-batch Adam on mean cross-entropy with seeded shuffling."""
    train, val = data
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(f.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = Scheduler(opt, cfg)
    tlog = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        f.train()
        losses = []
        for bi, idx in enumerate(batches(len(train), cfg.batch_size, rng)):
            xb, yb = train.images[idx], train.labels[idx]
            losses.append(_sgd_step(f, opt, lambda: dc.cross_entropy(f.forward(Tensor(xb)), yb),
                                    f"epoch {epoch} batch {bi}"))
        f.eval()
        val_loss, val_acc = _batch_losses(f, val.images, val.labels)
        tlog.add(epoch, "train", "loss", float(np.mean(losses)))
        tlog.add(epoch, "val", "loss", val_loss)
        tlog.add(epoch, "val", "accuracy", val_acc)
        tlog.add(epoch, "train", "lr", opt.lr)
        tlog.epochs = epoch
        log.info("clean epoch %d: train loss %.4f val loss %.4f val acc %.3f",
                 epoch, losses[-1], val_loss, val_acc)
        sched.step(val_loss)
    f.eval()
    return f, tlog


def train_detector_initial(g: Model, f_frozen: Model, data: tuple[Dataset, Dataset],
                           cfg: TrainConfig, attack_cfg: AttackConfig = AttackConfig(iters=10)
                           ) -> tuple[Model, TrainLog]:
    """Train ``g`` to separate benign inputs from PGD examples crafted against ``f`` only.

    PGD against a frozen classifier does not depend on ``g``, so every
    training item's adversarial twin is crafted once up front.
    """
    train, val = data
    f_frozen.eval()
    pgd_cfg = attack_cfg.with_(kind="pgd", record_loss_trajectory=False)
    adv_train = run_attack(f_frozen, None, train.images, train.labels, pgd_cfg).x_adv
    adv_val = run_attack(f_frozen, None, val.images, val.labels, pgd_cfg).x_adv
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(g.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = Scheduler(opt, cfg)
    tlog = TrainLog()
    for epoch in range(1, cfg.epochs + 1):
        g.train()
        losses = []
        for bi, idx in enumerate(batches(len(train), cfg.batch_size, rng)):
            xb, xa = train.images[idx], adv_train[idx]
            losses.append(_sgd_step(g, opt, lambda: _mixed_bce(g, xb, xa), f"epoch {epoch} batch {bi}"))
        val_loss, val_auc = detector_eval(g, val.images, adv_val)
        tlog.add(epoch, "train", "bce", float(np.mean(losses)))
        tlog.add(epoch, "val", "bce", val_loss)
        tlog.add(epoch, "val", "auc", val_auc)
        tlog.add(epoch, "train", "lr", opt.lr)
        tlog.epochs = epoch
        log.info("detector epoch %d: train bce %.4f val bce %.4f val auc %.3f",
                 epoch, np.mean(losses), val_loss, val_auc)
        sched.step(val_loss)
    g.eval()
    return g, tlog


def radar_finetune(g: Model, f_frozen: Model, data: tuple[Dataset, Dataset], cfg: TrainConfig,
                   attack_cfg: AttackConfig = AttackConfig(kind="opgd", iters=10),
                   val_limit: Optional[int] = None,
                   kinds: Optional[Sequence[str]] = None) -> tuple[Model, TrainLog]:
    """Adversarially finetune ``g`` against adaptive attacks crafted on the live detector.

    Per batch: freeze ``g``, craft OPGD/SPGD examples from the benign batch
    against ``f`` and the current ``g``, then take one optimizer step on the
    mean BCE over the ``2B`` mixed items. Validation crafts a fresh attack on
    the validation set each epoch; ``fixed`` metrics use one attacked set
    crafted against the starting detector.

    ``kinds`` (default: ``attack_cfg.kind`` alone) splits every batch into
    contiguous parts, one per attack kind, so the detector sees each attack
    at every step.
    """
    kinds = tuple(kinds) if kinds else (attack_cfg.kind,)
    if not kinds or any(k not in ("opgd", "spgd") for k in kinds):
        raise ValueError("radar_finetune needs adaptive attacks (opgd or spgd)")
    attack_cfg.validate(allow_zero_iters=True)
    train, val = data
    if val_limit is not None:
        val = val.subset(np.arange(min(val_limit, len(val))))
    f_frozen.eval()
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(g.params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    sched = Scheduler(opt, cfg)
    tlog = TrainLog()
    craft = attack_cfg.with_(record_loss_trajectory=False)

    def attacked(x, y):
        if craft.iters == 0:
            return x.copy()
        parts = np.array_split(np.arange(len(x)), len(kinds))
        out = np.empty_like(x)
        for kind, part in zip(kinds, parts):
            if len(part):
                out[part] = run_attack(f_frozen, g, x[part], y[part], craft.with_(kind=kind)).x_adv
        return out

    fixed_adv = attacked(val.images, val.labels)
    fixed_bce, fixed_auc = detector_eval(g, val.images, fixed_adv)
    tlog.add(0, "val", "fixed_bce", fixed_bce)
    tlog.add(0, "val", "fixed_auc", fixed_auc)
    for epoch in range(1, cfg.epochs + 1):
        losses = []
        for bi, idx in enumerate(batches(len(train), cfg.batch_size, rng)):
            xb, yb = train.images[idx], train.labels[idx]
            g.eval()
            xa = attacked(xb, yb)
            g.train()
            losses.append(_sgd_step(g, opt, lambda: _mixed_bce(g, xb, xa), f"epoch {epoch} batch {bi}"))
        g.eval()
        val_bce, val_auc = detector_eval(g, val.images, attacked(val.images, val.labels))
        fixed_bce, fixed_auc = detector_eval(g, val.images, fixed_adv)
        tlog.add(epoch, "train", "bce", float(np.mean(losses)))
        tlog.add(epoch, "val", "bce", val_bce)
        tlog.add(epoch, "val", "auc", val_auc)
        tlog.add(epoch, "val", "fixed_bce", fixed_bce)
        tlog.add(epoch, "val", "fixed_auc", fixed_auc)
        tlog.add(epoch, "train", "lr", opt.lr)
        tlog.epochs = epoch
        log.info("radar epoch %d: train bce %.4f val bce %.4f val auc %.3f",
                 epoch, np.mean(losses), val_bce, val_auc)
        sched.step(val_bce)
    g.eval()
    return g, tlog
