"""
The two-stage pipeline in miniature
===================================

Stage one learns a degradation generator from unpaired HR and LR images,
its outputs become training pairs, and stage two trains the SR network on
them. Step counts here are tiny so the script runs in about a minute; the
``unpaired-sr benchmark`` command runs the full desk-scale version.
"""

import tempfile
from pathlib import Path

import numpy as np

from unpaired_sr import datasets, imaging, metrics
from unpaired_sr.networks import GeneratorSpec, PatchDiscSpec, SRNetSpec
from unpaired_sr.smoke import make_smoke_corpus
from unpaired_sr.stage1 import Stage1Config, synthesize_lr_corpus, train_stage1
from unpaired_sr.stage2 import Stage2Config, super_resolve, train_stage2

work = Path(tempfile.mkdtemp())
smoke = make_smoke_corpus(work / "corpus", n=12, hr_size=64, seed=1, n_prime=8)
corpus = datasets.scan_corpus(smoke.lr_dir, smoke.hr_dir, 4)
print(len(corpus.hr_paths), "HR and", len(corpus.lr_paths), "LR training images")

# stage one: G maps bicubic LR towards real LR, F maps back
s1 = Stage1Config(total_steps=40, batch=4, patch_lr=16, log_every=20,
                  generator=GeneratorSpec(n_res_blocks=2, channels=16),
                  discriminator=PatchDiscSpec(base_channels=16, n_down=1))
g_state = train_stage1(corpus, s1)
for rec in g_state.history[::20]:
    print("stage 1", rec["step"], {k: round(rec[k], 3) for k in ("gan_g", "cycle", "total")})

# generated LR for every HR image, written with a pairs.tsv manifest
pairs = synthesize_lr_corpus(g_state, corpus.hr_paths, 4, work / "generated")
print("wrote", len(pairs.pairs), "pairs")

# stage two: SR on generated pairs, with feature alignment against real LR
s2 = Stage2Config(total_steps=40, batch=4, patch_lr=12, log_every=20,
                  sr=SRNetSpec(n_groups=2, n_blocks_per_group=1, channels=16, ca_reduction=4),
                  d_image=PatchDiscSpec(base_channels=16, n_down=2),
                  d_feature=PatchDiscSpec(base_channels=16, n_down=1, input_kind="feature",
                                          in_channels=16))
r_state = train_stage2(pairs, corpus, s2)
for rec in r_state.history[::20]:
    print("stage 2", rec["step"], {k: round(rec[k], 3) for k in ("l1", "ragan", "ada")})

# upscale the held-out real LR images and score them against the hidden HR
scores = []
for name in smoke.held_out_names():
    lr = imaging.load_image(smoke.hidden_lr_dir / name)
    hr = imaging.load_image(smoke.hidden_hr_dir / name)
    sr = super_resolve(r_state, lr)
    up = imaging.bicubic_resize(lr.astype(np.float64), 4)
    scores.append((metrics.psnr(sr, hr), metrics.psnr(up, hr)))
sr_db, up_db = np.mean(scores, axis=0)
print(f"held-out PSNR: SR {sr_db:.2f} dB, bicubic upsampling {up_db:.2f} dB")
