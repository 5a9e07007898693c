"""Desk-scale benchmark on the procedural smoke corpus.

One trial trains both stages on the unpaired halves of a fresh corpus and
scores the held-out images (those whose HR side was never seen):

* degradation quality: PSNR of G(bicubic(HR)) and of bicubic(HR) against
  the oracle LR;
* SR quality: PSNR of R(oracle LR) and of bicubic x s upsampling against HR.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import datasets, imaging, metrics
from .networks import GeneratorSpec, PatchDiscSpec, SRNetSpec
from .smoke import make_smoke_corpus
from .stage1 import Stage1Config, apply_generator, synthesize_lr_corpus, train_stage1
from .stage2 import Stage2Config, super_resolve, train_stage2

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SmokeSettings:
    n: int = 24
    hr_size: int = 96
    scale: int = 4
    blur_sigma: float = 1.2
    noise_sigma: float = 0.01
    n_prime: int = 16
    stage1_steps: int = 2000
    stage2_steps: int = 3000
    stage1_batch: int = 8
    stage2_batch: int = 8
    stage1_patch: int = 24
    stage2_patch: int = 16
    generator: GeneratorSpec = GeneratorSpec(n_res_blocks=2, channels=16)
    sr: SRNetSpec = SRNetSpec(n_groups=2, n_blocks_per_group=2, channels=32, ca_reduction=16,
                              scale=4)
    d_lr: PatchDiscSpec = PatchDiscSpec(base_channels=16, n_down=2)
    d_image: PatchDiscSpec = PatchDiscSpec(base_channels=16, n_down=3)
    d_feature: PatchDiscSpec = PatchDiscSpec(base_channels=16, n_down=2, input_kind="feature",
                                             in_channels=32)
    border: int = 4

    def stage1_config(self, seed: int) -> Stage1Config:
        return Stage1Config(total_steps=self.stage1_steps, batch=self.stage1_batch,
                            patch_lr=self.stage1_patch, seed=seed, generator=self.generator,
                            discriminator=self.d_lr, log_every=500)

    def stage2_config(self, seed: int, ablation: str = "full") -> Stage2Config:
        return Stage2Config(total_steps=self.stage2_steps, batch=self.stage2_batch,
                            patch_lr=self.stage2_patch, seed=seed, ablation=ablation,
                            sr=self.sr, d_image=self.d_image, d_feature=self.d_feature,
                            log_every=500)


@dataclass
class TrialResult:
    seed: int
    psnr_g_lr: float
    psnr_bicubic_lr: float
    psnr_sr: float
    psnr_bicubic_up: float
    checksum_full: str
    checksum_no_ada: str | None = None
    seconds: float = 0.0
    extra: dict = field(default_factory=dict)

    @property
    def degradation_wins(self) -> bool:
        return self.psnr_g_lr > self.psnr_bicubic_lr

    @property
    def sr_gain(self) -> float:
        return self.psnr_sr - self.psnr_bicubic_up


def degradation_scores(generator, smoke, scale: int) -> tuple[float, float]:
    """Mean PSNR vs. oracle LR of G(bicubic HR) and of plain bicubic HR."""
    g_scores, b_scores = [], []
    for name in smoke.held_out_names():
        hr = imaging.load_image(smoke.hidden_hr_dir / name).astype(np.float64)
        oracle = imaging.load_image(smoke.hidden_lr_dir / name)
        bic = imaging.bicubic_resize(hr, 1.0 / scale).astype(np.float32)
        g_scores.append(metrics.psnr(apply_generator(generator, bic), oracle))
        b_scores.append(metrics.psnr(bic, oracle))
    return float(np.mean(g_scores)), float(np.mean(b_scores))


def sr_scores(net, smoke, scale: int, border: int) -> tuple[float, float]:
    """Mean PSNR vs. HR of the SR output and of bicubic upsampling."""
    sr_scores_, up_scores = [], []
    for name in smoke.held_out_names():
        hr = imaging.load_image(smoke.hidden_hr_dir / name)
        lr = imaging.load_image(smoke.hidden_lr_dir / name)
        sr = super_resolve(net, lr)
        up = imaging.bicubic_resize(lr.astype(np.float64), scale)
        sr_scores_.append(metrics.psnr(metrics.crop_border(sr, border),
                                       metrics.crop_border(hr, border)))
        up_scores.append(metrics.psnr(metrics.crop_border(up, border),
                                      metrics.crop_border(hr, border)))
    return float(np.mean(sr_scores_)), float(np.mean(up_scores))


def run_trial(seed: int, workdir, settings: SmokeSettings = SmokeSettings(),
              with_no_ada: bool = False) -> TrialResult:
    """Corpus generation, both training stages and scoring for one seed."""
    start = time.time()
    torch.manual_seed(seed)
    workdir = Path(workdir)
    s = settings.scale
    smoke = make_smoke_corpus(workdir / "corpus", n=settings.n, hr_size=settings.hr_size,
                              scale=s, blur_sigma=settings.blur_sigma,
                              noise_sigma=settings.noise_sigma, seed=seed,
                              n_prime=settings.n_prime)
    corpus = datasets.scan_corpus(smoke.lr_dir, smoke.hr_dir, s)
    g_state = train_stage1(corpus, settings.stage1_config(seed))
    psnr_g, psnr_b = degradation_scores(g_state.nets["G"], smoke, s)
    log.info("seed %d stage 1: G %.3f dB, bicubic %.3f dB", seed, psnr_g, psnr_b)

    pairset = synthesize_lr_corpus(g_state, corpus.hr_paths, s, workdir / "generated")
    r_state = train_stage2(pairset, corpus, settings.stage2_config(seed))
    psnr_sr, psnr_up = sr_scores(r_state.nets["R"], smoke, s, settings.border)
    log.info("seed %d stage 2: SR %.3f dB, bicubic up %.3f dB", seed, psnr_sr, psnr_up)

    result = TrialResult(seed, psnr_g, psnr_b, psnr_sr, psnr_up,
                         checksum_full=r_state.checksum())
    if with_no_ada:
        ablated = train_stage2(pairset, corpus, settings.stage2_config(seed, "no_ada"))
        result.checksum_no_ada = ablated.checksum()
        result.extra["psnr_sr_no_ada"] = sr_scores(ablated.nets["R"], smoke, s,
                                                   settings.border)[0]
    result.seconds = time.time() - start
    return result


def quick_settings(**overrides) -> SmokeSettings:
    return replace(SmokeSettings(), **overrides)


def verdict(results: list[TrialResult], min_wins: int = 8, min_gain: float = 0.3) -> dict:
    """Pass/fail of the three smoke-benchmark conditions over ``results``."""
    wins = sum(r.degradation_wins for r in results)
    gains = sum(r.sr_gain >= min_gain for r in results)
    ablated = [r for r in results if r.checksum_no_ada is not None]
    return {
        "degradation": {"wins": wins, "of": len(results), "pass": wins >= min_wins},
        "sr_gain": {"wins": gains, "of": len(results), "pass": gains >= min_wins},
        "no_ada_distinct": {"pass": bool(ablated) and all(
            r.checksum_no_ada != r.checksum_full for r in ablated)},
    }


def save_results(results: list[TrialResult], path) -> None:
    payload = {"results": [asdict(r) for r in results], "verdict": verdict(results)}
    Path(path).write_text(json.dumps(payload, indent=2))


def load_results(path) -> list[TrialResult]:
    return [TrialResult(**r) for r in json.loads(Path(path).read_text())["results"]]


def run_benchmark(seeds, workdir, settings: SmokeSettings = SmokeSettings(),
                  out_json=None) -> list[TrialResult]:
    """Run one trial per seed; the first seed also trains the no_ada variant.

    With ``out_json`` the results so far are rewritten after every seed.
    """
    results = []
    for k, seed in enumerate(seeds):
        results.append(run_trial(seed, Path(workdir) / f"seed{seed}", settings,
                                 with_no_ada=(k == 0)))
        if out_json is not None:
            save_results(results, out_json)
    return results
