# %% [markdown]
# # Attacks: PGD and its detector-aware variants
#
# PGD raises the classifier's cross-entropy with signed steps inside an
# L-infinity ball. SPGD and OPGD also have to get past a detector: SPGD only
# includes the terms whose goal is still unmet, while OPGD steps along one
# gradient with its component along the other removed.

# %%
import numpy as np

from radarkit import attacks, data, metrics, nets, radar
from radarkit.attacks import AttackConfig

cfg = data.SynthConfig(per_class=40, image_size=16, sigma=0.01, seed=1)
train, val = data.split(data.synth_dataset(cfg), 0.7, seed=0)
f, _ = radar.train_clean(nets.build_classifier("cnn-small", 0, image_size=16), (train, val),
                         radar.TrainConfig(epochs=6, batch_size=32, lr=1e-3, t_max=6))
g, _ = radar.train_detector_initial(nets.build_detector("cnn-small", 1, image_size=16), f, (train, val),
                                    radar.TrainConfig(epochs=10, batch_size=32, lr=3e-3, t_max=10),
                                    AttackConfig(iters=10))
x, y = val.images[:40], val.labels[:40]
ben = nets.detect_scores(g, x)

# %% [markdown]
# Against a detector trained only on PGD examples, PGD is caught but the
# adaptive attacks drive the detector score below the benign scores.

# %%
for kind in ("pgd", "spgd", "opgd"):
    res = attacks.run_attack(f, g, x, y, AttackConfig(kind=kind, iters=40, early_stop=False))
    print(f"{kind:5s} adv acc {1 - res.classifier_fooled.mean():.2f}  "
          f"AUC {metrics.roc_auc_scores(ben, res.detector_scores):.2f}  "
          f"SR@5 {metrics.sr_at_n(ben, zip(res.detector_scores, res.classifier_fooled), 5):.2f}")

# %% [markdown]
# Every OPGD direction is orthogonal to the gradient it was projected against;
# the step hook exposes both.

# %%
cosines = []


def hook(i, direction, against, active):
    for b in np.flatnonzero(active):
        den = np.linalg.norm(direction[b]) * np.linalg.norm(against[b])
        if den > 0:
            cosines.append(abs(np.vdot(direction[b], against[b])) / den)


res = attacks.run_attack(f, g, x[:8], y[:8], AttackConfig(kind="opgd", iters=20, record_loss_trajectory=True),
                         on_step=hook)
print("max |cos| over", len(cosines), "steps:", max(cosines))

# %% [markdown]
# `AttackConfig` stops an item early by default, as soon as it fools the
# classifier and its detector score falls below 0.5. Its recorded loss then
# stays at about log 2. With `early_stop=False` the attacker keeps pushing the
# score toward zero.

# %%
print("early stop, image 0, every 5th iteration:", np.round(res.loss_bce[::5, 0], 4))
res = attacks.run_attack(f, g, x[:8], y[:8],
                         AttackConfig(kind="opgd", iters=20, record_loss_trajectory=True, early_stop=False))
print("no early stop, image 0, every 5th iteration:", np.round(res.loss_bce[::5, 0], 4))
