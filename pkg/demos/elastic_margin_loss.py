"""
The elastic angular margin loss
===============================

How the per-sample Gaussian margin shapes the target logit, and a quick
check of the hand-written gradient against finite differences.
"""

import math

import numpy as np

from maskdistill.core import MarginHeadConfig, make_rng, normalize
from maskdistill.losses import draw_elastic_margin, elastic_arc_loss, kd_embedding_loss

# one sample sitting exactly on its class centre: theta = 0
emb = np.array([[1.0, 0.0]])
protos = np.eye(2)
for m in (0.0, 0.3, 0.5, 0.8):
    loss, _, _ = elastic_arc_loss(emb, [0], protos, [m], scale=64.0)
    print("margin %.1f  target logit %6.2f  loss %.3e" % (m, 64 * math.cos(m), loss))

# margins are drawn per sample from N(m, sigma); sigma = 0 gives the fixed margin back
head = MarginHeadConfig()
draws = draw_elastic_margin(head, make_rng(0, "margin"), 100_000)
print("margin draws: mean %.3f std %.3f" % (draws.mean(), draws.std()))

# a batch of random unit embeddings against random prototypes
rng = make_rng(1, "demo")
emb = normalize(rng.normal(size=(6, 8)))
protos = normalize(rng.normal(size=(5, 8)))
labels = rng.integers(0, 5, 6)
margins = draw_elastic_margin(head, rng, 6)
loss, g_emb, _ = elastic_arc_loss(emb, labels, protos, margins, head.scale)
print("batch loss %.4f" % loss)

# central differences agree with the analytic gradient
h = 1e-5
num = np.zeros_like(emb)
for idx in np.ndindex(emb.shape):
    up, down = emb.copy(), emb.copy()
    up[idx] += h
    down[idx] -= h
    num[idx] = (elastic_arc_loss(up, labels, protos, margins, head.scale)[0]
                - elastic_arc_loss(down, labels, protos, margins, head.scale)[0]) / (2 * h)
print("relative gradient error %.2e" % (np.linalg.norm(num - g_emb) / np.linalg.norm(g_emb)))

# the distillation term is a plain mean squared error between unit vectors
teacher = normalize(rng.normal(size=(6, 8)))
kd, _ = kd_embedding_loss(emb, teacher)
cos = np.sum(emb * teacher, axis=1)
print("kd loss %.5f, from cosines %.5f" % (kd, np.mean((2 - 2 * cos) / 8)))
