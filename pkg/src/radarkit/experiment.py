"""Pipeline stages driven by an :class:`~radarkit.config.ExperimentConfig`.

Each stage reads its inputs from, and writes its outputs to, the configured
output directory, so stages can run in separate processes:

=================  ==========================================  ==============================
stage              reads                                       writes
=================  ==========================================  ==============================
train-classifier   (data)                                      classifier.rdr, classifier_log.csv,
                                                               config.resolved.ini
train-detector     classifier.rdr                              detector_pre.rdr, detector_pre_log.csv
finetune-radar     classifier.rdr, detector_pre.rdr            detector_radar.rdr, detector_radar_log.csv
attack             classifier.rdr, detector_{pre,radar}.rdr    adv_<kind>_<det>.rdr, trajectory_<kind>_<det>.csv
evaluate           classifier.rdr, any detector_*.rdr          report.csv, report.txt, eval_trajectory_*.csv
=================  ==========================================  ==============================
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import attacks, data, metrics, nets, radar
from .attacks import AttackConfig, AttackResult
from .config import ExperimentConfig
from .data import Dataset
from .metrics import AttackEval, EvalReport
from .nets import Model

log = logging.getLogger(__name__)

DETECTORS = ("pre", "radar")


class MissingInputError(FileNotFoundError):
    """A stage's prerequisite file is absent (run the earlier stage first)."""


@dataclass(frozen=True)
class Seeds:
    """Independent sub-seeds derived from the one experiment seed."""

    data: int
    test: int
    split: int
    f_init: int
    f_train: int
    g_init: int
    g_train: int
    radar: int

    @classmethod
    def derive(cls, seed: int) -> "Seeds":
        state = np.random.SeedSequence(seed).generate_state(8, dtype=np.uint32)
        return cls(*(int(s) for s in state))


@dataclass(frozen=True)
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


def load_splits(cfg: ExperimentConfig) -> Splits:
    seeds = Seeds.derive(cfg.seed)
    d = cfg["data"]
    if d["kind"] == "synth":
        pool = data.synth_dataset(cfg.synth(seeds.data))
        test = data.synth_dataset(cfg.synth(seeds.test, per_class=d["test_per_class"]))
    else:
        pool = data.load_cifar10(d["path"], "train")
        test = data.load_cifar10(d["path"], "test")
    if d["train_limit"]:
        pool = pool.subset(np.arange(min(d["train_limit"], len(pool))))
    if d["test_limit"]:
        test = test.subset(np.arange(min(d["test_limit"], len(test))))
    train, val = data.split(pool, d["train_fraction"], seeds.split)
    return Splits(train, val, test)


def _path(cfg: ExperimentConfig, name: str) -> Path:
    return cfg.out / name


def _need(path: Path, stage: str) -> Path:
    if not path.exists():
        raise MissingInputError(f"missing {path}; run `{stage}` first")
    return path


def _load(cfg: ExperimentConfig, name: str, stage: str) -> Model:
    return nets.load_checkpoint(_need(_path(cfg, name), stage))


def _detector_name(which: str) -> str:
    return f"detector_{which}.rdr"


def train_classifier_stage(cfg: ExperimentConfig) -> Path:
    seeds = Seeds.derive(cfg.seed)
    sp = load_splits(cfg)
    C, S = sp.train.image_shape[0], sp.train.image_shape[1]
    f = nets.build_classifier(cfg["classifier"]["arch"], seeds.f_init, num_classes=sp.train.num_classes,
                              in_channels=C, image_size=S)
    f, tlog = radar.train_clean(f, (sp.train, sp.val), cfg.train_config("classifier", seeds.f_train))
    cfg.out.mkdir(parents=True, exist_ok=True)
    _path(cfg, "config.resolved.ini").write_text(cfg.dump())
    nets.save_checkpoint(f, _path(cfg, "classifier.rdr"))
    tlog.write_csv(_path(cfg, "classifier_log.csv"))
    return _path(cfg, "classifier.rdr")


def train_detector_stage(cfg: ExperimentConfig) -> Path:
    seeds = Seeds.derive(cfg.seed)
    f = _load(cfg, "classifier.rdr", "train-classifier")
    sp = load_splits(cfg)
    C, S = sp.train.image_shape[0], sp.train.image_shape[1]
    g = nets.build_detector(cfg["detector"]["arch"], seeds.g_init, in_channels=C, image_size=S)
    craft = cfg.attack_config("pgd", iters=cfg["detector"]["attack_iters"])
    g, tlog = radar.train_detector_initial(g, f, (sp.train, sp.val),
                                           cfg.train_config("detector", seeds.g_train), craft)
    nets.save_checkpoint(g, _path(cfg, _detector_name("pre")))
    tlog.write_csv(_path(cfg, "detector_pre_log.csv"))
    return _path(cfg, _detector_name("pre"))


def finetune_radar_stage(cfg: ExperimentConfig) -> Path:
    seeds = Seeds.derive(cfg.seed)
    f = _load(cfg, "classifier.rdr", "train-classifier")
    g = _load(cfg, _detector_name("pre"), "train-detector")
    sp = load_splits(cfg)
    r = cfg["radar"]
    craft = cfg.attack_config(r["attack"][0], iters=r["attack_iters"])
    g, tlog = radar.radar_finetune(g, f, (sp.train, sp.val), cfg.train_config("radar", seeds.radar),
                                   craft, val_limit=r["val_limit"] or None, kinds=r["attack"])
    nets.save_checkpoint(g, _path(cfg, _detector_name("radar")))
    tlog.write_csv(_path(cfg, "detector_radar_log.csv"))
    return _path(cfg, _detector_name("radar"))


def save_adversarial_batch(result: AttackResult, x: np.ndarray, y: np.ndarray, path) -> None:
    """Adversarial batch in the checkpoint container: x, x_adv, y, fooled, scores."""
    tensors = {"x": x, "x_adv": result.x_adv, "y": y.astype(np.float64),
               "classifier_fooled": result.classifier_fooled.astype(np.float64)}
    if result.detector_scores is not None:
        tensors["detector_scores"] = result.detector_scores
    Path(path).write_bytes(nets.encode_tensors(tensors))


def load_adversarial_batch(path) -> dict[str, np.ndarray]:
    return nets.decode_tensors(Path(path).read_bytes())


def attack_stage(cfg: ExperimentConfig) -> tuple[Path, Path]:
    a = cfg["attack"]
    f = _load(cfg, "classifier.rdr", "train-classifier")
    g = _load(cfg, _detector_name(a["detector"]),
              "train-detector" if a["detector"] == "pre" else "finetune-radar")
    test = load_splits(cfg).test
    if a["limit"]:
        test = test.subset(np.arange(min(a["limit"], len(test))))
    res = attacks.run_attack(f, g, test.images, test.labels, cfg.attack_config(record=True),
                             batch_size=a["batch_size"])
    stem = f"{a['kind']}_{a['detector']}"
    batch_path, traj_path = _path(cfg, f"adv_{stem}.rdr"), _path(cfg, f"trajectory_{stem}.csv")
    save_adversarial_batch(res, test.images, test.labels, batch_path)
    attacks.write_trajectory_csv(res, traj_path)
    return batch_path, traj_path


def evaluate_detector(f: Model, g: Model, test: Dataset, kinds: Sequence[str], n_list: Sequence[float],
                      attack_cfg: AttackConfig, label: str, trajectory_images: int = 20,
                      batch_size: int = 256) -> tuple[EvalReport, dict[str, AttackResult]]:
    """Attack ``test`` with each kind against (f, g) and score the detector.

    ``median_final_bce`` is the median attacker-side detector loss at the
    returned point over the first ``trajectory_images`` items.
    """
    f.eval()
    g.eval()
    clean = metrics.accuracy(nets.predict_labels(f, test.images), test.labels)
    ben = nets.detect_scores(g, test.images)
    report = EvalReport(label, clean, meta={"n_test": str(len(test))})
    results = {}
    for kind in kinds:
        res = attacks.run_attack(f, g, test.images, test.labels,
                                 attack_cfg.with_(kind=kind, record_loss_trajectory=True),
                                 batch_size=batch_size)
        pairs = list(zip(res.detector_scores, res.classifier_fooled))
        report.attacks[kind] = AttackEval(
            kind,
            metrics.roc_auc_scores(ben, res.detector_scores),
            {float(n): metrics.sr_at_n(ben, pairs, n) for n in n_list},
            float(1.0 - res.classifier_fooled.mean()),
            float(np.median(res.loss_bce[-1, :trajectory_images])),
        )
        results[kind] = res
        log.info("%s %s: auc %.3f sr@5 %s", label, kind, report.attacks[kind].auc,
                 report.attacks[kind].sr.get(5.0))
    return report, results


def evaluate_stage(cfg: ExperimentConfig) -> list[EvalReport]:
    f = _load(cfg, "classifier.rdr", "train-classifier")
    present = [w for w in DETECTORS if _path(cfg, _detector_name(w)).exists()]
    if not present:
        raise MissingInputError(f"no detector checkpoint under {cfg.out}; run `train-detector` first")
    test = load_splits(cfg).test
    e = cfg["eval"]
    if e["test_limit"]:
        test = test.subset(np.arange(min(e["test_limit"], len(test))))
    reports = []
    for which in present:
        g = nets.load_checkpoint(_path(cfg, _detector_name(which)))
        rep, results = evaluate_detector(f, g, test, e["kinds"], e["n_list"], cfg.attack_config(),
                                         which, e["trajectory_images"], cfg["attack"]["batch_size"])
        rep.meta["seed"] = str(cfg.seed)
        for kind, res in results.items():
            k = min(e["trajectory_images"], len(test))
            attacks.write_trajectory_csv(_subset_result(res, k), _path(cfg, f"eval_trajectory_{which}_{kind}.csv"))
        reports.append(rep)
    _write_reports(reports, cfg.out)
    return reports


def _subset_result(res: AttackResult, k: int) -> AttackResult:
    return AttackResult(res.x_adv[:k], res.classifier_fooled[:k], res.detector_evaded[:k],
                        res.loss_ce[:, :k], res.loss_bce[:, :k], res.active_case[:, :k],
                        None if res.detector_scores is None else res.detector_scores[:k])


def _write_reports(reports: Sequence[EvalReport], out: Path) -> None:
    rows = [("report", "attack", "metric", "value")]
    for r in reports:
        rows += r.rows()
    with open(out / "report.csv", "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    (out / "report.txt").write_text(metrics.format_tables(reports))


def read_report_csv(path) -> dict[tuple[str, str, str], str]:
    with open(path, newline="") as fh:
        return {(r["report"], r["attack"], r["metric"]): r["value"] for r in csv.DictReader(fh)}


STAGES = {
    "train-classifier": train_classifier_stage,
    "train-detector": train_detector_stage,
    "finetune-radar": finetune_radar_stage,
    "attack": attack_stage,
    "evaluate": evaluate_stage,
}


def run_pipeline(cfg: ExperimentConfig, stages: Optional[Sequence[str]] = None) -> None:
    """Run stages in order (default: everything except the standalone ``attack``)."""
    for name in stages or ("train-classifier", "train-detector", "finetune-radar", "evaluate"):
        log.info("stage %s", name)
        STAGES[name](cfg)
