"""Detection and robustness statistics: accuracy, ROC-AUC, SR@N, reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

BEN, ADV = "ben", "adv"


@dataclass(frozen=True)
class ScoredSample:
    score: float
    origin: str  # "ben" | "adv"
    classifier_fooled: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"score must be finite in [0, 1], got {self.score}")
        if self.origin not in (BEN, ADV):
            raise ValueError(f"origin must be 'ben' or 'adv', got {self.origin!r}")


def accuracy(predictions, labels) -> float:
    predictions, labels = np.asarray(predictions), np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predictions == labels))


def roc_auc_scores(ben_scores, adv_scores) -> float:
    """P(random adv score > random ben score), ties counted one half.

    Computed from the Mann-Whitney U statistic on average ranks.
    """
    ben = np.asarray(ben_scores, dtype=np.float64).reshape(-1)
    adv = np.asarray(adv_scores, dtype=np.float64).reshape(-1)
    if ben.size == 0 or adv.size == 0:
        raise ValueError("roc_auc needs at least one benign and one adversarial sample")
    ranks = rankdata(np.concatenate([adv, ben]))
    n_adv, n_ben = adv.size, ben.size
    u = ranks[:n_adv].sum() - n_adv * (n_adv + 1) / 2.0
    return float(u / (n_adv * n_ben))


def roc_auc(samples: Sequence[ScoredSample]) -> float:
    ben = [s.score for s in samples if s.origin == BEN]
    adv = [s.score for s in samples if s.origin == ADV]
    if not ben or not adv:
        raise ValueError("roc_auc needs both benign and adversarial samples (single-class input)")
    return roc_auc_scores(ben, adv)


def fpr_threshold(ben_scores, n_percent: float) -> float:
    """Smallest benign score ``tau`` with ``mean(ben >= tau) <= n/100``; +inf if none.

    Inputs scoring ``>= tau`` are flagged adversarial.
    """
    ben = np.sort(np.asarray(ben_scores, dtype=np.float64).reshape(-1))
    if ben.size == 0:
        raise ValueError("need at least one benign score")
    if not 0 < n_percent < 100:
        raise ValueError("n_percent must lie in (0, 100)")
    # ben[i:] are the scores >= ben[i] for the first index i of each distinct value
    firsts = np.searchsorted(ben, ben, side="left")
    # float-safe "frac <= n/100": compare counts
    ok = (ben.size - firsts) * 100 <= n_percent * ben.size
    if not ok.any():
        return float("inf")
    return float(ben[np.argmax(ok)])


def sr_at_n(ben_scores, adv_results: Iterable[tuple[float, bool]], n_percent: float = 5.0) -> float:
    """Fraction of attacks that fool the classifier *and* score below the N% FPR threshold."""
    adv = list(adv_results)
    if not adv:
        raise ValueError("need at least one attack result")
    tau = fpr_threshold(ben_scores, n_percent)
    scores = np.array([s for s, _ in adv], dtype=np.float64)
    fooled = np.array([bool(fl) for _, fl in adv])
    return float(np.mean(fooled & (scores < tau)))


@dataclass
class AttackEval:
    kind: str
    auc: float
    sr: dict[float, float]
    adv_accuracy: float
    median_final_bce: float = float("nan")


@dataclass
class EvalReport:
    label: str
    clean_accuracy: float
    attacks: dict[str, AttackEval] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def rows(self) -> list[tuple[str, str, str, str]]:
        out = [(self.label, "clean", "accuracy", repr(self.clean_accuracy))]
        for kind, ev in self.attacks.items():
            out.append((self.label, kind, "auc", repr(ev.auc)))
            for n, v in sorted(ev.sr.items()):
                out.append((self.label, kind, f"sr@{n:g}", repr(v)))
            out.append((self.label, kind, "adv_accuracy", repr(ev.adv_accuracy)))
            out.append((self.label, kind, "median_final_bce", repr(ev.median_final_bce)))
        for k, v in sorted(self.meta.items()):
            out.append((self.label, "meta", k, str(v)))
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("report", "attack", "metric", "value"))
            w.writerows(self.rows())

    def table(self) -> str:
        """Plain-text AUC and SR@N tables, one row per report, one column per attack."""
        return format_tables([self])


def format_tables(reports: Sequence[EvalReport]) -> str:
    kinds = []
    for r in reports:
        kinds += [k for k in r.attacks if k not in kinds]
    ns = sorted({n for r in reports for ev in r.attacks.values() for n in ev.sr})
    w = max([8] + [len(r.label) for r in reports])

    def block(title, cols, cell):
        head = f"{'detector':<{w}} | " + " ".join(f"{c:>10}" for c in cols)
        lines = [title, head, "-" * len(head)]
        for r in reports:
            lines.append(f"{r.label:<{w}} | " + " ".join(f"{cell(r, c):>10}" for c in cols))
        return "\n".join(lines)

    def fmt(v):
        return "-" if v is None or (isinstance(v, float) and np.isnan(v)) else f"{v:.2f}"

    def auc_cell(r, c):
        if c == "avg":
            vals = [ev.auc for ev in r.attacks.values()]
            return fmt(float(np.mean(vals)) if vals else None)
        return fmt(r.attacks[c].auc if c in r.attacks else None)

    out = [block("ROC-AUC (higher is better)", ["avg"] + [f"{k}" for k in kinds], auc_cell)]
    adaptive = [k for k in kinds if k != "pgd"]
    for n in ns:
        def sr_cell(r, c, n=n):
            if c == "avg":
                vals = [r.attacks[k].sr[n] for k in adaptive if k in r.attacks and n in r.attacks[k].sr]
                return fmt(float(np.mean(vals)) if vals else None)
            ev = r.attacks.get(c)
            return fmt(ev.sr.get(n) if ev else None)
        out.append(block(f"SR@{n:g} (lower is better)", ["avg"] + adaptive, sr_cell))
    out.append(block("Accuracy", ["clean"] + [f"adv:{k}" for k in kinds],
                     lambda r, c: fmt(r.clean_accuracy if c == "clean"
                                      else r.attacks[c[4:]].adv_accuracy if c[4:] in r.attacks else None)))
    return "\n\n".join(out) + "\n"
