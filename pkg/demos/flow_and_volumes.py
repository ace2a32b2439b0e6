"""
Appearance-motion volumes
=========================

A clip becomes a three channel volume: grayscale, then the horizontal and
vertical Horn-Schunck flow between consecutive frames. This walks through a
synthetic clip and a textured image shifted by one pixel.
"""
import numpy as np

from dap3d import appearance, synth
from dap3d.tensor import rng

# a smooth random texture, shifted one pixel to the right
tex = rng(0).uniform(0, 1, (40, 40))
for _ in range(3):
    tex = appearance._neighbour_average(tex)
tex = (tex - tex.min()) / (tex.max() - tex.min())
u, v = appearance.horn_schunck_flow(tex, np.roll(tex, 1, axis=1))
print("median flow inside the border: u %.3f  v %.3f" % (np.median(u[5:-5, 5:-5]), np.median(v[5:-5, 5:-5])))

# the regularizer weight trades smoothness against brightness constancy
for alpha in (1 / 255, 15 / 255, 60 / 255):
    u, _ = appearance.horn_schunck_flow(tex, np.roll(tex, 1, axis=1), alpha=alpha)
    print("alpha %.3f -> median u %.3f" % (alpha, np.median(u[5:-5, 5:-5])))

# a walking figure: the flow channels light up where the limbs move
spec = synth.sample_spec(0, seed=0, index=0, length=16)
frames, ann = synth.synth_action_clip(spec, length=16)
vol = appearance.compose(frames)
print(spec.motion_program, "clip", frames.shape, "-> volume", vol.shape)
moving = np.abs(vol[1:]).sum(axis=0) > 0.1
print("fraction of voxels with visible motion: %.3f" % moving.mean())
print("mean horizontal flow on moving voxels: %.3f px/frame" % vol[1][moving].mean())

# resizing rescales the flow so it stays in output-pixel units
fast = appearance.warp_clip(vol, (8, 24, 24))
print("warped to", fast.shape, "mean |Vx| %.3f vs %.3f" % (np.abs(fast[1]).mean(), np.abs(vol[1]).mean()))
