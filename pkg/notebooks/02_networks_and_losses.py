"""
Networks and losses
===================

A tour of the three network families and of the adversarial objectives at
their uninformative starting point.
"""

import math

import torch

from unpaired_sr.losses import (DISCRIMINATOR, GENERATOR, LossWeights, adaptive_feature_loss,
                                gan_loss, ragan_loss, stage2_objective)
from unpaired_sr.networks import GeneratorSpec, PatchDiscSpec, SRNetSpec, build, parameter_count

# the degradation generator starts as the identity map
g = build(GeneratorSpec(n_res_blocks=2, channels=16), seed=0)
x = torch.rand(1, 3, 24, 24)
with torch.no_grad():
    print("fresh generator is identity:", torch.equal(g(x), x))

# the SR network returns the upscaled image and the tapped features
r = build(SRNetSpec(n_groups=2, n_blocks_per_group=2, channels=32, scale=4), seed=0)
with torch.no_grad():
    sr, feat = r(x)
print("SR output", tuple(sr.shape), "features", tuple(feat.shape))

# the patch discriminator scores 70 px patches with a stride of 8
spec = PatchDiscSpec()
d = build(spec, seed=0)
with torch.no_grad():
    print("64 px input -> logit map", tuple(d(torch.rand(1, 3, 64, 64)).shape[-2:]))
for s in (GeneratorSpec(), SRNetSpec(), spec):
    print(f"{type(s).__name__}: {parameter_count(s):,} parameters")

# every adversarial loss equals 2 ln 2 when the critic outputs zeros
z = torch.zeros(1, 1, 6, 6)
for fn in (gan_loss, ragan_loss, adaptive_feature_loss):
    print(fn.__name__, [round(float(fn(z, z, side)), 6) for side in (GENERATOR, DISCRIMINATOR)],
          "2 ln 2 =", round(2 * math.log(2), 6))

# the stage-two total is a plain weighted sum
report = stage2_objective({"l1": 0.5, "ragan": 1.386, "gan_real": 1.386, "ada": 1.386},
                          LossWeights())
print("weighted total:", report.total, report.terms)
