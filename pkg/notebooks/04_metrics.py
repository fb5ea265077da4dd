# %% [markdown]
# # Detection metrics
#
# ROC-AUC is the probability that a random adversarial input scores above a
# random benign one (ties count half). SR@N fixes the detector threshold so that
# at most N% of benign inputs are flagged, then counts the attacks that both
# fool the classifier and stay under that threshold.

# %%
import numpy as np

from radarkit import metrics

rng = np.random.default_rng(0)
ben = rng.beta(2, 8, 500)
adv = rng.beta(5, 3, 300)
fooled = rng.uniform(size=300) < 0.9
print("AUC", round(metrics.roc_auc_scores(ben, adv), 4))
for n in (1, 5, 10, 25):
    tau = metrics.fpr_threshold(ben, n)
    print(f"N={n:>2}%  threshold {tau:.3f}  benign flagged {np.mean(ben >= tau):.3f}  "
          f"SR@N {metrics.sr_at_n(ben, zip(adv, fooled), n):.3f}")

# %% [markdown]
# A looser false-positive budget lowers the threshold, so SR@N can only fall as
# N grows. Scores from a strictly increasing transform give the same AUC.

# %%
print("AUC after sqrt:", metrics.roc_auc_scores(np.sqrt(ben), np.sqrt(adv)))

# %% [markdown]
# Reports collect these numbers per attack and render plain-text tables.

# %%
rep = metrics.EvalReport("demo", 0.99, {
    "pgd": metrics.AttackEval("pgd", 0.98, {5.0: 0.02}, 0.0, 3.1),
    "opgd": metrics.AttackEval("opgd", 0.11, {5.0: 0.93}, 0.0, 0.004),
})
print(rep.table())
