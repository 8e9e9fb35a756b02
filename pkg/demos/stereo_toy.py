"""
Overfitting a synthetic stereo pair
===================================

A two-layer scene: textured background plus a nearer rectangle. Pixels of
the background just left of the rectangle are hidden in the right view.
We train the small decoder for a few hundred steps and then look at the
disparity error, the predicted occlusion mask and the self-attention
sampling offsets in the hidden strip.
"""

import numpy as np

from matchattn.decoder import consistency_check, preset
from matchattn.metrics import compute_metrics
from matchattn.synthetic import gen_scene
from matchattn.training import TrainConfig, train_toy

scene = gen_scene("two_layer", 64, 128, {"d_bg": 2, "d_fg": 8, "rect": (42, 16, 74, 48)}, seed=0)
print("hidden reference pixels:", int((~scene.noc0).sum()))

steps = 400


def log(step, row):
    if step % 50 == 0 or step == steps - 1:
        print(f"step {step:4d}  loss {row['loss']:8.3f}  noc EPE {row['epe']:.3f}")


model, trace = train_toy([scene], TrainConfig(steps=steps, lr=1e-3), preset("desk", "stereo"), callback=log)

out = model(scene.I0, scene.I1)
rep = compute_metrics(out.disparity, -scene.R0[..., 0], noc=scene.noc0)
print(f"all: EPE {rep.all.epe:.3f} bad>1px {rep.all.bad_1:.3f}   noc: EPE {rep.noc.epe:.3f}")

# left-right check on the two predicted fields
m0, _, _ = consistency_check(out.R.data[0], out.R.data[1], 1.0)
m0 = m0.astype(bool)
print("mask IoU vs true visibility:", round(float((m0 & scene.noc0).sum() / (m0 | scene.noc0).sum()), 3))

# where do hidden background pixels sample in self-attention?
xs = np.arange(128)[None].repeat(64, 0)
hidden = ~scene.noc0 & (xs >= 2) & (xs < 42)
sx = out.sR.data[0, ..., 0].mean(-1)
print(f"hidden strip: mean self offset x = {sx[hidden].mean():.2f}, pointing left at {(sx[hidden] < 0).mean():.0%}")
