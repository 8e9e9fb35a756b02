"""
Attention weights at a continuous window centre
===============================================

A query looks at a w x w window whose centre may sit between pixels.
BilinearSoftmax blends the softmaxes of the four integer-anchored
sub-windows around that centre, so the weights move smoothly with it.
"""

import numpy as np

from matchattn.bilinear_softmax import bilinear_softmax_forward, bilinear_weights

w = 3
rng = np.random.default_rng(0)
sim = rng.normal(size=(w + 1) ** 2)

# an integer centre puts all the mass on the north-west sub-window
for frac in [(0.0, 0.0), (0.5, 0.0), (0.5, 0.5), (0.9, 0.9)]:
    a = bilinear_softmax_forward(sim[None], np.array([frac]), w).weights[0]
    print(f"frac={frac}  sub-window weights={np.round(bilinear_weights(frac), 3)}")
    print(np.round(a.reshape(w + 1, w + 1), 3), " sum =", round(float(a.sum()), 12))

# sliding the centre a little changes the weights a little
fx = np.linspace(0, 0.999, 6)
rows = bilinear_softmax_forward(np.repeat(sim[None], 6, 0), np.stack([fx, np.zeros(6)], 1), w).weights
print("weight of the right-most column as the centre slides right:")
print(np.round(rows.reshape(6, w + 1, w + 1)[:, :, -1].sum(1), 3))
