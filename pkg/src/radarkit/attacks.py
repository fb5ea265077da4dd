"""L-infinity gradient attacks on a classifier, optionally adaptive to a detector.

``pgd`` ascends the classifier's cross-entropy only. ``spgd`` (selective) and
``opgd`` (orthogonal) attack classifier and detector jointly: the attacker
wants ``argmax f(x') != y`` and the detector to report benign.

Losses are *ascended* on ``CE(f(x'), y)`` and ``BCE(g(x'), adv)``. Recorded
trajectories report the detector term from the attacker's side, i.e.
``BCE(g(x'), ben) = -log(1 - P(adv))``, which falls toward zero as the
detector is fooled.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .diffcore import Tape, Tensor
from .nets import Model

ATTACK_KINDS = ("pgd", "spgd", "opgd")
ORTH_EPS = 1e-12

# active_case codes in trajectories
CASE_NONE, CASE_CE, CASE_BCE, CASE_BOTH = 0, 1, 2, 3
CASE_NAMES = {CASE_NONE: "none", CASE_CE: "ce", CASE_BCE: "bce", CASE_BOTH: "ce+bce"}


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 16 / 255
    alpha: float = 0.03
    iters: int = 100
    kind: str = "pgd"
    record_loss_trajectory: bool = False
    # P(adv) at or above this counts as "flagged" for the adaptive attacks
    detector_threshold: float = 0.5
    # freeze an item once both goals hold; otherwise keep pushing the detector
    early_stop: bool = True

    def validate(self, allow_zero_iters: bool = False) -> "AttackConfig":
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not self.alpha > 0:
            raise ValueError("alpha must be > 0")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if self.iters < (0 if allow_zero_iters else 1):
            raise ValueError("iters must be >= 1")
        if not 0 < self.detector_threshold <= 1:
            raise ValueError("detector_threshold must lie in (0, 1]")
        return self

    def with_(self, **kw) -> "AttackConfig":
        return replace(self, **kw)


@dataclass
class AttackResult:
    x_adv: np.ndarray
    classifier_fooled: np.ndarray
    detector_evaded: np.ndarray
    # (iters + 1) x B each; row i is the iterate before step i, the last row is final
    loss_ce: Optional[np.ndarray] = None
    loss_bce: Optional[np.ndarray] = None
    active_case: Optional[np.ndarray] = None
    detector_scores: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def success(self) -> np.ndarray:
        return self.classifier_fooled & self.detector_evaded


def linf_step_project(x_cur, x_orig, grad, alpha, epsilon):
    """Signed ascent step, projected onto the eps-ball around ``x_orig`` and the [0, 1] box."""
    x_next = x_cur + alpha * np.sign(grad)
    x_next = np.clip(x_next, x_orig - epsilon, x_orig + epsilon)
    return np.clip(x_next, 0.0, 1.0)


def orth_component(u, v):
    """``u`` minus its projection on ``v`` (both flattened); ``u`` if ``v`` is ~0."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    uf, vf = u.reshape(-1), v.reshape(-1)
    vv = vf @ vf
    if np.sqrt(vv) < ORTH_EPS:
        return u.copy()
    return (uf - (uf @ vf / vv) * vf).reshape(u.shape)


def orth_rows(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """:func:`orth_component` applied to each batch item independently."""
    B = u.shape[0]
    uf, vf = u.reshape(B, -1), v.reshape(B, -1)
    vv = np.einsum("ij,ij->i", vf, vf)
    uv = np.einsum("ij,ij->i", uf, vf)
    coef = np.where(np.sqrt(vv) < ORTH_EPS, 0.0, uv / np.where(vv > 0, vv, 1.0))
    return (uf - coef[:, None] * vf).reshape(u.shape)


def _ce_grad(f: Model, x: np.ndarray, y: np.ndarray):
    """Per-item CE, its input gradient and the predicted labels."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        logits = f.forward(xt)
        loss = dc.cross_entropy(logits, y, reduction="sum")
    per_item = -dc.log_softmax(logits.data)[np.arange(len(y)), y]
    pred = np.argmax(logits.data, axis=1)
    dc.backward(tape, loss)
    return per_item, xt.grad, pred


def _bce_grad(g: Model, x: np.ndarray):
    """Input gradient of ``BCE(g(x), adv)`` plus P(adv) and the attacker-side loss."""
    xt = Tensor(x, requires_grad=True)
    with Tape() as tape:
        logit = g.forward(xt)
        loss = dc.bce_with_logits(logit, np.ones(len(x)), reduction="sum")
    z = logit.data
    prob, _ = dc._stable_sigmoid(z)
    attacker_loss = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))  # -log(1 - p)
    dc.backward(tape, loss)
    return xt.grad, prob, attacker_loss


def _logits(f: Model, x: np.ndarray) -> np.ndarray:
    return f.forward(Tensor(x)).data


def _scores(g: Model, x: np.ndarray) -> np.ndarray:
    return dc.sigmoid(g.forward(Tensor(x))).data


def _attacker_bce(g: Model, x: np.ndarray) -> np.ndarray:
    z = g.forward(Tensor(x)).data
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def _ce_values(f: Model, x: np.ndarray, y: np.ndarray):
    logits = _logits(f, x)
    return -dc.log_softmax(logits)[np.arange(len(y)), y], np.argmax(logits, axis=1)


class _Recorder:
    def __init__(self, enabled: bool, iters: int, B: int):
        self.enabled = enabled
        if enabled:
            self.ce = np.zeros((iters + 1, B))
            self.bce = np.full((iters + 1, B), np.nan)
            self.case = np.zeros((iters + 1, B), dtype=np.int8)

    def put(self, i, ce, bce=None, case=None):
        if not self.enabled:
            return
        self.ce[i] = ce
        if bce is not None:
            self.bce[i] = bce
        if case is not None:
            self.case[i] = case

    def fill_result(self, res: AttackResult, upto: int):
        if not self.enabled:
            return
        # frozen tail (early exit of the whole batch) repeats the last row
        for i in range(upto + 1, len(self.ce)):
            self.ce[i], self.bce[i], self.case[i] = self.ce[upto], self.bce[upto], CASE_NONE
        res.loss_ce, res.loss_bce, res.active_case = self.ce, self.bce, self.case


class _Best:
    """Per item, the classifier-fooling iterate with the lowest detector score."""

    def __init__(self, x: np.ndarray):
        self.x = x.copy()
        self.score = np.full(len(x), np.inf)

    def offer(self, x_cur: np.ndarray, fooled: np.ndarray, score: np.ndarray) -> None:
        better = fooled & (score < self.score)
        if better.any():
            self.x[better] = x_cur[better]
            self.score[better] = score[better]

    def select(self, x_final: np.ndarray) -> np.ndarray:
        found = np.isfinite(self.score)
        return np.where(found.reshape((-1,) + (1,) * (x_final.ndim - 1)), self.x, x_final)


def _finish(f, g, x_adv, y, cfg, rec, last, meta) -> AttackResult:
    pred = np.argmax(_logits(f, x_adv), axis=1)
    if g is not None:
        scores = _scores(g, x_adv)
        evaded = scores < cfg.detector_threshold
    else:
        scores, evaded = None, np.ones(len(y), dtype=bool)
    res = AttackResult(x_adv, pred != y, evaded, detector_scores=scores, meta=meta)
    rec.fill_result(res, last)
    return res


def _close(f, g, x_adv, y, best, rec, i):
    """Score the final iterate, pick the returned point and record its losses."""
    if best is not None:
        logits = _logits(f, x_adv)
        best.offer(x_adv, np.argmax(logits, axis=1) != y, _scores(g, x_adv))
        x_adv = best.select(x_adv)
    if rec.enabled:
        ce, _ = _ce_values(f, x_adv, y)
        rec.put(i, ce, _attacker_bce(g, x_adv))
    return x_adv


StepHook = Callable[[int, np.ndarray, np.ndarray, np.ndarray], None]


def pgd(f: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
        g: Optional[Model] = None, on_step: Optional[StepHook] = None) -> AttackResult:
    """Maximise the classifier's cross-entropy inside the eps-ball, starting at ``x``.

    ``g`` is optional and only used to report detector flags and losses.
    """
    cfg.validate(allow_zero_iters=True)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    x_adv = x.copy()
    rec = _Recorder(cfg.record_loss_trajectory, cfg.iters, len(y))
    for i in range(cfg.iters):
        ce, grad, _ = _ce_grad(f, x_adv, y)
        if rec.enabled:
            rec.put(i, ce, _attacker_bce(g, x_adv) if g is not None else None,
                    np.full(len(y), CASE_CE))
        if on_step is not None:
            on_step(i, grad, np.zeros_like(grad), np.ones(len(y), dtype=bool))
        x_adv = linf_step_project(x_adv, x, grad, cfg.alpha, cfg.epsilon)
    if rec.enabled:
        ce, _ = _ce_values(f, x_adv, y)
        rec.put(cfg.iters, ce, _attacker_bce(g, x_adv) if g is not None else None)
    return _finish(f, g, x_adv, y, cfg, rec, cfg.iters, {"kind": "pgd", "iters_run": cfg.iters})


def spgd(f: Model, g: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
         on_step: Optional[StepHook] = None) -> AttackResult:
    """Selective PGD: ascend ``CE * [f(x')=y] + BCE(g(x'), adv) * [g(x') flags adv]``.

    Both indicators are read at the current iterate and per item; an item whose
    indicators are both false gets a zero gradient and does not move. Without
    ``early_stop`` the detector term stays switched on once the classifier is
    fooled, and each item returns its fooling iterate with the lowest score.
    """
    cfg.validate(allow_zero_iters=True)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    x_adv = x.copy()
    B = len(y)
    rec = _Recorder(cfg.record_loss_trajectory, cfg.iters, B)
    best = None if cfg.early_stop else _Best(x)
    last = cfg.iters
    for i in range(cfg.iters):
        ce, g_ce, pred = _ce_grad(f, x_adv, y)
        g_bce, prob, att = _bce_grad(g, x_adv)
        m_ce = pred == y
        m_bce = prob >= cfg.detector_threshold
        if best is not None:
            best.offer(x_adv, ~m_ce, prob)
            m_bce = m_bce | ~m_ce
        case = m_ce * CASE_CE + m_bce * CASE_BCE
        rec.put(i, ce, att, case)
        if not (m_ce | m_bce).any():
            last = i
            break
        shape = (B,) + (1,) * (x.ndim - 1)
        grad = m_ce.reshape(shape) * g_ce + m_bce.reshape(shape) * g_bce
        if on_step is not None:
            on_step(i, grad, np.zeros_like(grad), m_ce | m_bce)
        x_adv = linf_step_project(x_adv, x, grad, cfg.alpha, cfg.epsilon)
    else:
        x_adv = _close(f, g, x_adv, y, best, rec, cfg.iters)
    return _finish(f, g, x_adv, y, cfg, rec, last, {"kind": "spgd", "iters_run": last})


def opgd(f: Model, g: Model, x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
         on_step: Optional[StepHook] = None) -> AttackResult:
    """Orthogonal PGD.

    Per item and iteration: while ``f`` still predicts ``y`` step along the CE
    gradient with its component along the BCE gradient removed; once ``f`` is
    fooled but ``g`` still flags the input, step along the BCE gradient with
    its CE component removed. With ``early_stop`` an item that meets both goals
    stops moving; otherwise it keeps taking detector steps and returns its
    fooling iterate with the lowest detector score.
    """
    cfg.validate(allow_zero_iters=True)
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    x_adv = x.copy()
    B = len(y)
    rec = _Recorder(cfg.record_loss_trajectory, cfg.iters, B)
    best = None if cfg.early_stop else _Best(x)
    last = cfg.iters
    shape = (B,) + (1,) * (x.ndim - 1)
    for i in range(cfg.iters):
        ce, g_ce, pred = _ce_grad(f, x_adv, y)
        g_bce, prob, att = _bce_grad(g, x_adv)
        use_ce = pred == y
        if best is not None:
            best.offer(x_adv, ~use_ce, prob)
        flagged = prob >= cfg.detector_threshold
        use_bce = ~use_ce & (flagged | (not cfg.early_stop))
        case = use_ce * CASE_CE + use_bce * CASE_BCE
        rec.put(i, ce, att, case)
        active = use_ce | use_bce
        if not active.any():
            last = i
            break
        d_ce = orth_rows(g_ce, g_bce)
        d_bce = orth_rows(g_bce, g_ce)
        direction = np.where(use_ce.reshape(shape), d_ce, np.where(use_bce.reshape(shape), d_bce, 0.0))
        against = np.where(use_ce.reshape(shape), g_bce, g_ce)
        if on_step is not None:
            on_step(i, direction, against, active)
        x_adv = linf_step_project(x_adv, x, direction, cfg.alpha, cfg.epsilon)
    else:
        x_adv = _close(f, g, x_adv, y, best, rec, cfg.iters)
    return _finish(f, g, x_adv, y, cfg, rec, last, {"kind": "opgd", "iters_run": last})


def run_attack(f: Model, g: Optional[Model], x: np.ndarray, y: np.ndarray, cfg: AttackConfig,
               batch_size: int = 256, on_step: Optional[StepHook] = None) -> AttackResult:
    """Dispatch on ``cfg.kind`` in fixed-size chunks and merge results by index."""
    cfg.validate(allow_zero_iters=True)
    if cfg.kind != "pgd" and g is None:
        raise ValueError(f"{cfg.kind} needs a detector")
    f.eval()
    if g is not None:
        g.eval()
    parts = []
    for s in range(0, len(y), batch_size):
        xb, yb = x[s:s + batch_size], y[s:s + batch_size]
        if cfg.kind == "pgd":
            parts.append(pgd(f, xb, yb, cfg, g=g, on_step=on_step))
        elif cfg.kind == "spgd":
            parts.append(spgd(f, g, xb, yb, cfg, on_step=on_step))
        else:
            parts.append(opgd(f, g, xb, yb, cfg, on_step=on_step))
    if len(parts) == 1:
        return parts[0]

    def cat(name, axis=0):
        vals = [getattr(p, name) for p in parts]
        return None if vals[0] is None else np.concatenate(vals, axis=axis)

    return AttackResult(cat("x_adv"), cat("classifier_fooled"), cat("detector_evaded"),
                        cat("loss_ce", 1), cat("loss_bce", 1), cat("active_case", 1),
                        cat("detector_scores"), {"kind": cfg.kind})


TRAJECTORY_COLUMNS = ("image_id", "iteration", "loss_ce", "loss_bce", "active_case")


def write_trajectory_csv(result: AttackResult, path, image_ids=None) -> None:
    if result.loss_ce is None:
        raise ValueError("attack was run without record_loss_trajectory")
    T, B = result.loss_ce.shape
    ids = np.arange(B) if image_ids is None else np.asarray(image_ids)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRAJECTORY_COLUMNS)
        for b in range(B):
            for t in range(T):
                bce = result.loss_bce[t, b]
                w.writerow([int(ids[b]), t, repr(float(result.loss_ce[t, b])),
                            "" if np.isnan(bce) else repr(float(bce)),
                            CASE_NAMES[int(result.active_case[t, b])]])


def read_trajectory_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
