"""The single-step regime in a few lines.

Training noises a clean latent all the way to the terminal step and asks the
network for v; inference starts from pure noise and inverts v once. Both rely
on the v parameterization being exactly invertible.

    python demos/02_single_step_diffusion.py
"""

import numpy as np
import torch

from ouro.core import ChannelMask
from ouro.diffusion import (
    NoiseSpec, assemble_condition, make_schedule, multires_noise, noise_target, v_target, v_to_z0,
)
from ouro import sceneforge as sf

sched = make_schedule()
T = sched.T
print(f"T={T}, alpha_bar[T]={sched.alpha_bar[T]:.3e}  (almost no signal left at the last step)")

z0 = torch.randn(1, 3, 32, 32, dtype=torch.float64)
eps = torch.from_numpy(multires_noise((32, 32, 3), NoiseSpec(seed=1))).permute(2, 0, 1)[None]
zT = noise_target(z0, eps, T, sched)
v = v_target(z0, eps, T, sched)
print(f"v -> z0 round trip error: {(v_to_z0(zT, v, sched) - z0).abs().max():.2e}")

pyramid = multires_noise((64, 64, 3), NoiseSpec(seed=0))
print(f"pyramid noise: mean {pyramid.mean():+.3f}, std {pyramid.std():.3f}")

# the X->RGB condition: 11 planes, missing channels zeroed
rec = sf.make_record("demo", 5, "city-like", resolution=32)
cond = assemble_condition(rec.intrinsics)
print(f"condition planes {tuple(cond.planes.shape)}, present: {rec.intrinsics.mask.present()}")
rng = np.random.default_rng(0)
dropped = assemble_condition(rec.intrinsics, mask=ChannelMask.full(), dropout_p=0.5, rng=rng)
print(f"after channel dropout at p=0.5: {int(dropped.keep.sum())} of 5 channels kept")
