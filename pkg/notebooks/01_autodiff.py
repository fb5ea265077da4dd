# %% [markdown]
# # Reverse-mode differentiation with a tape
#
# `radarkit.diffcore` records each operation applied to tensors that require
# gradients while a `Tape` is active. `backward` then walks the tape in reverse
# and fills `.grad` on the leaves. Here we differentiate a tiny two-layer
# network and compare against central differences.

# %%
import numpy as np

from radarkit import diffcore as dc

rng = np.random.default_rng(0)
x = dc.Tensor(rng.normal(size=(4, 5)), requires_grad=True)
w1 = dc.Tensor(rng.normal(size=(5, 8)), requires_grad=True)
w2 = dc.Tensor(rng.normal(size=(8, 3)), requires_grad=True)
labels = np.array([0, 2, 1, 1])


def loss_fn():
    hidden = dc.relu(dc.matmul(x, w1))
    return dc.cross_entropy(dc.matmul(hidden, w2), labels)


with dc.Tape() as tape:
    loss = loss_fn()
print("loss", loss.item(), "| ops on tape:", [r.name for r in tape.records])
dc.backward(tape, loss)

# %% [markdown]
# Central differences on a few weights. The tape is single-use, so each
# re-evaluation below happens outside any tape and records nothing.

# %%
h = 1e-6
for (i, j) in [(0, 0), (3, 5), (4, 7)]:
    keep = w1.data[i, j]
    w1.data[i, j] = keep + h
    up = loss_fn().item()
    w1.data[i, j] = keep - h
    down = loss_fn().item()
    w1.data[i, j] = keep
    print(f"w1[{i},{j}]  tape {w1.grad[i, j]: .10f}   central diff {(up - down) / (2 * h): .10f}")

# %% [markdown]
# Non-finite values are caught at the op that produced them.

# %%
try:
    with np.errstate(over="ignore"):
        with dc.Tape():
            dc.sigmoid(dc.scale(dc.Tensor([1.0], requires_grad=True), np.inf))
except dc.NonFiniteError as exc:
    print("caught:", exc)
