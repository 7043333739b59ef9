"""Evaluate the three head losses and check their gradients numerically."""

import math

import numpy as np

from pcpanoptic.losses import (
    cross_entropy,
    embedding_loss,
    embedding_loss_grad,
    loss_breakdown,
    offset_loss,
    offset_loss_grad,
)

rng = np.random.default_rng(0)

print("uniform 4-class CE:", cross_entropy(np.full((3, 4), 0.25), [0, 1, 2]), "ln 4 =", math.log(4))

# Two instances whose codes are exactly 2 * delta_d apart: only the
# regulariser on the means is non-zero.
ef = np.zeros((6, 5))
ef[3:, 0] = 3.0
terms = embedding_loss(ef, [0, 0, 0, 1, 1, 1])
print("separated codes:", terms, "total", terms.total)

# A random configuration and a central-difference check of the gradient.
inst = np.repeat([0, 1, 2], 5)
ef = rng.normal(0, 1, (15, 4))
g = embedding_loss_grad(ef, inst)
h, num = 1e-5, np.zeros_like(ef)
for i, j in np.ndindex(ef.shape):
    e = np.zeros_like(ef)
    e[i, j] = h
    num[i, j] = (embedding_loss(ef + e, inst).total - embedding_loss(ef - e, inst).total) / (2 * h)
print("embedding gradient max abs error:", np.abs(g - num).max())

pos = rng.normal(0, 2, (15, 3))
cent = np.array([pos[inst == i].mean(0) for i in range(3)])[inst]
print("exact offsets:", offset_loss(cent - pos, pos, inst))
print("gradient at the optimum:", np.abs(offset_loss_grad(cent - pos, pos, inst)).max())

noisy = cent - pos + rng.normal(0, 0.3, pos.shape)
print(loss_breakdown(probs=np.full((15, 3), 1 / 3), labels=inst, embeddings=ef, offsets=noisy,
                     positions=pos, instances=inst).to_dict())
