# %% [markdown]
# # Adversarial finetuning of the detector
#
# The detector is first trained on PGD examples. Finetuning then crafts OPGD
# examples against the *current* detector for every batch and takes one step on
# the mixed benign/adversarial loss. Here half of each batch is crafted with
# OPGD and half with SPGD. The classifier is frozen throughout.
#
# This is a scaled-down version of `configs/acceptance.ini` (fewer images,
# epochs and attack iterations) so that it finishes in a few minutes; the
# numbers are correspondingly weaker than the full run.

# %%
import numpy as np

from radarkit import data, experiment, nets, radar
from radarkit.attacks import AttackConfig

cfg = data.SynthConfig(per_class=40, image_size=16, sigma=0.01, seed=1)
train, val = data.split(data.synth_dataset(cfg), 0.7, seed=0)
test = data.synth_dataset(data.SynthConfig(per_class=4, image_size=16, sigma=0.01, seed=2))
f, _ = radar.train_clean(nets.build_classifier("cnn-small", 0, image_size=16), (train, val),
                         radar.TrainConfig(epochs=8, batch_size=32, lr=1e-3, t_max=8))
g_pre, _ = radar.train_detector_initial(nets.build_detector("cnn-small", 1, image_size=16), f, (train, val),
                                        radar.TrainConfig(epochs=15, batch_size=32, lr=3e-3, t_max=15),
                                        AttackConfig(iters=10))
f_before = f.state()

# %%
g_post, log = radar.radar_finetune(g_pre.copy(), f, (train, val),
                                   radar.TrainConfig(epochs=25, batch_size=32, lr=1e-3, schedule="cosine", t_max=25),
                                   AttackConfig(kind="opgd", iters=10, early_stop=False), val_limit=60,
                                   kinds=("opgd", "spgd"))
print("val AUC against freshly crafted attacks, by epoch:", np.round(log.series("val", "auc"), 2))
print("classifier untouched:", all(np.array_equal(f_before[k], v) for k, v in f.state().items()))

# %% [markdown]
# Evaluate both detectors against 50-step attacks on held-out images.

# %%
attack = AttackConfig(iters=50, early_stop=False)
reports = []
for label, g in (("pre", g_pre), ("finetuned", g_post)):
    rep, _ = experiment.evaluate_detector(f, g, test, ("pgd", "opgd", "spgd"), (5.0,), attack, label,
                                          trajectory_images=20)
    reports.append(rep)
from radarkit.metrics import format_tables  # noqa: E402

print(format_tables(reports))
print("median final attacker loss (OPGD):",
      {r.label: f"{r.attacks['opgd'].median_final_bce:.2e}" for r in reports})
