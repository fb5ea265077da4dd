"""Acceptance run: eight end-to-end criteria at their stated tolerances.

Each test records one PASS/FAIL line that is printed in the pytest terminal
summary. Criteria 3 to 6 share one full pipeline run on
``configs/acceptance.ini`` (several minutes on one core).
"""

import hashlib
import time
from pathlib import Path

import numpy as np
import pytest

from radarkit import attacks, cli, experiment, metrics, nets
from radarkit import diffcore as dc
from radarkit.attacks import AttackConfig
from radarkit.config import load_config

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "acceptance.ini"

pytestmark = pytest.mark.acceptance


def sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


# ----------------------------------------------------------------------------
# 1. finite-difference gradient check of every architecture


FD_H = 1e-3
FD_SEEDS = 20


def _loss_and_pattern(model, x, target):
    """Loss, its tape, the input tensor and the on/off pattern of every ReLU."""
    xt = dc.Tensor(x, requires_grad=True)
    with dc.Tape() as tape:
        out = model.forward(xt)
        if model.is_detector:
            loss = dc.bce_with_logits(out, target)
        else:
            loss = dc.cross_entropy(out, target)
    pattern = [r.inputs[0].data > 0 for r in tape.records if r.name == "relu"]
    return loss, tape, xt, pattern


def _same(p, q):
    return all(np.array_equal(a, b) for a, b in zip(p, q))


def fd_check(model, x, target, rng, n_input=20, n_per_param=3):
    """Max relative error over sampled coordinates plus (checked, skipped) counts.

    A central difference straddling a ReLU kink measures a secant, not the
    derivative; coordinates whose +h or -h evaluation changes any ReLU's
    on/off state are skipped and counted.
    """
    model.train()
    loss, tape, xt, base = _loss_and_pattern(model, x, target)
    dc.backward(tape, loss)
    cases = [(x, xt.grad, i) for i in rng.choice(x.size, n_input, replace=False)]
    for p in model.params.values():
        cases += [(p.data, p.grad, i) for i in rng.choice(p.data.size, min(n_per_param, p.data.size), replace=False)]
    worst, checked, skipped = 0.0, 0, 0
    for arr, grad, i in cases:
        flat = arr.reshape(-1)
        keep = flat[i]
        vals = []
        for sign in (1.0, -1.0):
            flat[i] = keep + sign * FD_H
            lv, _, _, pat = _loss_and_pattern(model, x, target)
            vals.append((lv.item(), _same(pat, base)))
        flat[i] = keep
        if not (vals[0][1] and vals[1][1]):
            skipped += 1
            continue
        fd = (vals[0][0] - vals[1][0]) / (2 * FD_H)
        an = grad.reshape(-1)[i]
        worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
        checked += 1
    return worst, checked, skipped


def test_c1_gradient_check(record_criterion):
    t0 = time.perf_counter()
    worst, checked, skipped = 0.0, 0, 0
    for seed in range(FD_SEEDS):
        rng = np.random.default_rng(seed)
        for arch in nets.ARCHITECTURES:
            x = rng.uniform(size=(2, 3, 8, 8))
            models = [
                (nets.build_classifier(arch, seed, num_classes=4, image_size=8), rng.integers(0, 4, 2)),
                (nets.build_detector(arch, seed, image_size=8), rng.integers(0, 2, 2).astype(float)),
            ]
            for model, target in models:
                w, c, s = fd_check(model, x, target, rng)
                worst, checked, skipped = max(worst, w), checked + c, skipped + s
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60 and checked >= 0.8 * (checked + skipped)
    record_criterion(1, ok, f"max rel err {worst:.2e} over {checked} coords "
                            f"({skipped} kink-straddling skipped), {FD_SEEDS} seeds, {elapsed:.1f}s")
    assert ok


# ----------------------------------------------------------------------------
# 2. metric oracles


def auc_oracle(ben, adv):
    diff = adv[:, None] - ben[None, :]
    return ((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size


def sr_oracle(ben, adv_scores, fooled, n):
    best = np.inf
    for tau in np.unique(ben):
        if (ben >= tau).sum() * 100 <= n * ben.size:
            best = min(best, tau)
    return float(np.mean(fooled & (adv_scores < best)))


def test_c2_metric_oracles(record_criterion):
    rng = np.random.default_rng(2)
    auc_err = sr_err = 0.0
    for trial in range(100):
        total = int(rng.integers(2, 1001))
        n_ben = int(rng.integers(1, total))
        draw = (lambda k: rng.integers(0, 21, k) / 20.0) if trial % 2 else (lambda k: rng.uniform(size=k))
        ben, adv = draw(n_ben), draw(total - n_ben)
        auc_err = max(auc_err, abs(metrics.roc_auc_scores(ben, adv) - auc_oracle(ben, adv)))
        fooled = rng.integers(0, 2, adv.size).astype(bool)
        n = float(rng.choice([1.0, 5.0, 10.0, rng.uniform(0.5, 60)]))
        got = metrics.sr_at_n(ben, zip(adv, fooled), n)
        sr_err = max(sr_err, abs(got - sr_oracle(ben, adv, fooled, n)))
    ok = auc_err <= 1e-12 and sr_err <= 1e-12
    record_criterion(2, ok, f"max |AUC - oracle| {auc_err:.1e}, max |SR - oracle| {sr_err:.1e}, 100 instances each")
    assert ok


# ----------------------------------------------------------------------------
# shared full pipeline for criteria 3 to 6


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    out = tmp_path_factory.mktemp("acceptance")
    cfg = load_config(CONFIG, out_override=str(out))
    times = {}
    for stage in ("train-classifier", "train-detector"):
        t0 = time.perf_counter()
        experiment.STAGES[stage](cfg)
        times[stage] = time.perf_counter() - t0
    f_hash = sha(out / "classifier.rdr")
    t0 = time.perf_counter()
    experiment.finetune_radar_stage(cfg)
    times["finetune-radar"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    experiment.evaluate_stage(cfg)
    times["evaluate"] = time.perf_counter() - t0
    report = experiment.read_report_csv(out / "report.csv")
    return dict(cfg=cfg, out=out, times=times, f_hash=f_hash, report=report)


def metric(pipeline, label, kind, name):
    return float(pipeline["report"][(label, kind, name)])


def test_c3_classifier_and_pgd(pipeline, record_criterion):
    cfg, out = pipeline["cfg"], pipeline["out"]
    f = nets.load_checkpoint(out / "classifier.rdr")
    test = experiment.load_splits(cfg).test
    t0 = time.perf_counter()
    clean = metrics.accuracy(nets.predict_labels(f, test.images), test.labels)
    res = attacks.run_attack(f, None, test.images, test.labels, AttackConfig(epsilon=16 / 255, alpha=0.03, iters=100))
    adv = 1.0 - float(res.classifier_fooled.mean())
    elapsed = pipeline["times"]["train-classifier"] + time.perf_counter() - t0
    ok = clean >= 0.90 and adv <= 0.05 and elapsed <= 600
    record_criterion(3, ok, f"clean acc {clean:.3f}, PGD-100 adv acc {adv:.3f}, {elapsed:.0f}s")
    assert ok


def test_c4_pre_radar(pipeline, record_criterion):
    pgd = metric(pipeline, "pre", "pgd", "auc")
    rows = {k: (metric(pipeline, "pre", k, "auc"), metric(pipeline, "pre", k, "sr@5")) for k in ("opgd", "spgd")}
    ok = pgd >= 0.95 and all(auc <= 0.3 and sr >= 0.8 for auc, sr in rows.values())
    detail = f"AUC pgd {pgd:.3f}; " + "; ".join(f"{k} AUC {a:.3f} SR@5 {s:.2f}" for k, (a, s) in rows.items())
    record_criterion(4, ok, detail)
    assert ok


def test_c5_post_radar(pipeline, record_criterion):
    rows = {k: (metric(pipeline, "radar", k, "auc"), metric(pipeline, "radar", k, "sr@5")) for k in ("opgd", "spgd")}
    unchanged = sha(pipeline["out"] / "classifier.rdr") == pipeline["f_hash"]
    seconds = pipeline["times"]["finetune-radar"]
    ok = all(auc >= 0.9 and sr <= 0.1 for auc, sr in rows.values()) and unchanged and seconds <= 1800
    detail = "; ".join(f"{k} AUC {a:.3f} SR@5 {s:.2f}" for k, (a, s) in rows.items())
    record_criterion(5, ok, f"{detail}; classifier bytes unchanged: {unchanged}; finetune {seconds:.0f}s")
    assert ok


def test_c6_attacker_loss_ratio(pipeline, record_criterion):
    pre = metric(pipeline, "pre", "opgd", "median_final_bce")
    post = metric(pipeline, "radar", "opgd", "median_final_bce")
    ratio = post / pre if pre > 0 else np.inf
    ok = ratio >= 10 and pre < 0.1
    record_criterion(6, ok, f"median final attacker BCE (OPGD, 20 images) pre {pre:.2e}, post {post:.2e}, "
                            f"ratio {ratio:.1e}")
    assert ok


# ----------------------------------------------------------------------------
# 7. feasibility and orthogonality over randomized invocations


def test_c7_attack_invariants(record_criterion):
    rng = np.random.default_rng(7)
    models = [(nets.build_classifier(a, s, num_classes=3, image_size=4).eval(),
               nets.build_detector(a, s + 1, image_size=4).eval())
              for a in nets.ARCHITECTURES for s in (0, 1)]
    worst_linf = -np.inf
    worst_orth = 0.0
    box_ok = True
    n_dirs = 0

    def hook(i, direction, against, active):
        nonlocal worst_orth, n_dirs
        for b in np.flatnonzero(active):
            na = np.linalg.norm(against[b])
            if na < attacks.ORTH_EPS:
                continue
            nd = np.linalg.norm(direction[b])
            n_dirs += 1
            if nd > 0:
                worst_orth = max(worst_orth, abs(np.vdot(direction[b], against[b])) / (nd * na))

    for trial in range(10_000):
        f, g = models[trial % len(models)]
        B = int(rng.integers(1, 4))
        x = rng.uniform(size=(B, 3, 4, 4))
        x[rng.uniform(size=x.shape) < 0.1] = 0.0
        x[rng.uniform(size=x.shape) < 0.1] = 1.0
        eps = float(rng.choice([0.0, rng.uniform(0, 0.3), 16 / 255]))
        cfg = AttackConfig(epsilon=eps, alpha=float(rng.uniform(1e-3, 0.2)), iters=int(rng.integers(1, 4)),
                           kind=str(rng.choice(attacks.ATTACK_KINDS)), early_stop=bool(rng.integers(0, 2)),
                           detector_threshold=float(rng.uniform(0.05, 1.0)))
        y = rng.integers(0, 3, B)
        res = attacks.run_attack(f, g, x, y, cfg, on_step=hook if cfg.kind == "opgd" else None)
        worst_linf = max(worst_linf, float(np.abs(res.x_adv - x).max()) - eps)
        box_ok &= bool(res.x_adv.min() >= 0.0 and res.x_adv.max() <= 1.0)
    ok = worst_linf <= 1e-9 and box_ok and worst_orth <= 1e-9 and n_dirs > 1000
    record_criterion(7, ok, f"10000 invocations: max(|x_adv-x|inf - eps) {worst_linf:.1e}, box ok {box_ok}, "
                            f"max OPGD |cos| {worst_orth:.1e} over {n_dirs} directions")
    assert ok


# ----------------------------------------------------------------------------
# 8. bitwise reproducibility of a full pipeline


REPRO_CONFIG = """\
[run]
seed = 11

[data]
per_class = 12
test_per_class = 3
image_size = 8
sigma = 0.01

[classifier]
epochs = 2

[detector]
epochs = 2
attack_iters = 3

[radar]
epochs = 2
attack_iters = 3
val_limit = 10

[attack]
iters = 10
kind = opgd
detector = radar

[eval]
kinds = pgd, opgd, spgd
n_list = 1, 5
trajectory_images = 5
"""


def test_c8_reproducible(tmp_path, record_criterion):
    cfg_path = tmp_path / "repro.ini"
    cfg_path.write_text(REPRO_CONFIG)
    dirs = [tmp_path / "a", tmp_path / "b"]
    for d in dirs:
        for cmd in ("train-classifier", "train-detector", "finetune-radar", "attack", "evaluate"):
            assert cli.main([cmd, "--config", str(cfg_path), "--out", str(d)]) == 0
    names = sorted(p.name for p in dirs[0].iterdir())
    same = names == sorted(p.name for p in dirs[1].iterdir())
    differing = [n for n in names if (dirs[0] / n).read_bytes() != (dirs[1] / n).read_bytes()]
    ok = same and not differing and len(names) >= 12
    record_criterion(8, ok, f"{len(names)} files compared, differing: {differing or 'none'}")
    assert ok
