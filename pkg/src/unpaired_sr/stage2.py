"""Stage two: degradation-adaptive SR training and tiled inference."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import datasets, imaging
from .datasets import GeneratedPairSet, UnpairedCorpus
from .errors import ConfigError, NumericError
from .losses import (DISCRIMINATOR, GENERATOR, LossWeights, adaptive_feature_loss,
                     gan_real_hr_loss, l1_content_loss, ragan_loss, stage2_objective)
from .networks import PatchDiscSpec, SRNetSpec, build
from .training import (TrainState, check_finite, lr_at, make_optimizer, read_checkpoint,
                       requires_grad, restore_into, save_checkpoint, set_lr, to_tensor,
                       write_log, zero_grads)

log = logging.getLogger(__name__)

STAGE2_ABLATIONS = ("full", "bic_input", "no_ragan", "no_gan_real", "no_ada", "l1_only")

_MASKS = {
    "full": {},
    "bic_input": {},
    "no_ragan": {"lambda2": 0.0},
    "no_gan_real": {"lambda3": 0.0},
    "no_ada": {"lambda4": 0.0},
    "l1_only": {"lambda2": 0.0, "lambda3": 0.0, "lambda4": 0.0},
}

_NET_SEEDS = {"R": 21, "D_Ra": 22, "D_HR": 23, "D_ada": 24}


@dataclass(frozen=True)
class Stage2Config:
    total_steps: int
    batch: int = 8
    patch_lr: int = 64
    lr0: float = 1e-4
    halve_every: int = 1_600_000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    d_steps_per_g_step: int = 1
    ablation: str = "full"
    sr: SRNetSpec = field(default_factory=SRNetSpec)
    d_image: PatchDiscSpec = field(default_factory=PatchDiscSpec)
    d_feature: PatchDiscSpec = field(
        default_factory=lambda: PatchDiscSpec(input_kind="feature", in_channels=64))
    augment: bool = False
    log_every: int = 100
    checkpoint_every: int = 0
    out_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        for name in ("total_steps", "batch", "patch_lr", "halve_every", "d_steps_per_g_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stage2.{name} must be positive")
        if not self.lr0 > 0:
            raise ConfigError("stage2.lr0 must be positive")
        if self.ablation not in STAGE2_ABLATIONS:
            raise ConfigError(f"stage2.ablation must be one of {STAGE2_ABLATIONS}")
        if self.d_feature.in_channels != self.sr.channels:
            raise ConfigError(f"feature discriminator expects {self.d_feature.in_channels} "
                              f"channels but the SR tap has {self.sr.channels}")

    @property
    def effective_weights(self) -> LossWeights:
        return replace(self.weights, **_MASKS[self.ablation])

    @property
    def needs_real_lr(self) -> bool:
        w = self.effective_weights
        return w.lambda3 > 0 or w.lambda4 > 0


def init_stage2(cfg: Stage2Config) -> TrainState:
    w = cfg.effective_weights
    base = cfg.seed * 1000
    nets = {"R": build(cfg.sr, base + _NET_SEEDS["R"])}
    if w.lambda2 > 0:
        nets["D_Ra"] = build(cfg.d_image, base + _NET_SEEDS["D_Ra"])
    if w.lambda3 > 0:
        nets["D_HR"] = build(cfg.d_image, base + _NET_SEEDS["D_HR"])
    if w.lambda4 > 0:
        nets["D_ada"] = build(cfg.d_feature, base + _NET_SEEDS["D_ada"])
    optimizers = {name: make_optimizer(net, cfg.lr0) for name, net in nets.items()}
    return TrainState(stage=2, step=0, config=cfg, nets=nets, optimizers=optimizers,
                      rng=np.random.default_rng(cfg.seed))


def _batch(pairset, corpus, cfg: Stage2Config, rng):
    gen, hr, real = datasets.stage2_batch(pairset, corpus, cfg.batch, cfg.patch_lr, rng,
                                          need_real_lr=cfg.needs_real_lr)
    if cfg.augment:
        # identical transform for the aligned pair: reuse the generator state
        pairs = []
        for g, h in zip(gen, hr):
            st = rng.bit_generator.state
            g2 = imaging.augment(g[None], rng)
            rng.bit_generator.state = st
            pairs.append((g2, imaging.augment(h[None], rng)))
        gen = np.concatenate([p[0] for p in pairs])
        hr = np.concatenate([p[1] for p in pairs])
        if real is not None:
            real = np.concatenate([imaging.augment(x[None], rng) for x in real])
    return to_tensor(gen), to_tensor(hr), (to_tensor(real) if real is not None else None)


def stage2_step(state: TrainState, pairset: GeneratedPairSet,
                corpus: UnpairedCorpus | None) -> dict:
    cfg: Stage2Config = state.config
    w = cfg.effective_weights
    nets = state.nets
    R = nets["R"]
    D_Ra, D_HR, D_ada = nets.get("D_Ra"), nets.get("D_HR"), nets.get("D_ada")
    discs = [d for d in (D_Ra, D_HR, D_ada) if d is not None]

    set_lr(state.optimizers.values(), lr_at(state.step, cfg))
    gen_lr, hr, real_lr = _batch(pairset, corpus, cfg, state.rng)

    sr_gen, feat_gen = R(gen_lr)
    sr_real = feat_real = None
    if real_lr is not None:
        sr_real, feat_real = R(real_lr)

    disc_terms: dict[str, float] = {}
    if discs:
        requires_grad(discs, True)
        for _ in range(cfg.d_steps_per_g_step):
            zero_grads(discs)
            d_loss = 0.0
            if D_Ra is not None:
                t = ragan_loss(D_Ra(hr), D_Ra(sr_gen.detach()), DISCRIMINATOR)
                disc_terms["d_ra"] = float(t.detach())
                d_loss = d_loss + t
            if D_HR is not None:
                t = gan_real_hr_loss(D_HR(hr), D_HR(sr_real.detach()), DISCRIMINATOR)
                disc_terms["d_hr"] = float(t.detach())
                d_loss = d_loss + t
            if D_ada is not None:
                t = adaptive_feature_loss(D_ada(feat_gen.detach()), D_ada(feat_real.detach()),
                                          DISCRIMINATOR)
                disc_terms["d_ada"] = float(t.detach())
                d_loss = d_loss + t
            check_finite(disc_terms)
            d_loss.backward()
            for name in ("D_Ra", "D_HR", "D_ada"):
                if name in nets:
                    state.optimizers[name].step()
        requires_grad(discs, False)

    zero_grads([R])
    components = {"l1": l1_content_loss(sr_gen, hr)}
    if D_Ra is not None:
        components["ragan"] = ragan_loss(D_Ra(hr), D_Ra(sr_gen), GENERATOR)
    if D_HR is not None:
        with torch.no_grad():
            d_on_hr = D_HR(hr)
        components["gan_real"] = gan_real_hr_loss(d_on_hr, D_HR(sr_real), GENERATOR)
    if D_ada is not None:
        components["ada"] = adaptive_feature_loss(D_ada(feat_gen), D_ada(feat_real), GENERATOR)
    report = stage2_objective(components, w)
    if report.loss is not None:
        report.loss.backward()
    state.optimizers["R"].step()
    requires_grad(discs, True)

    record = report.record(state.step)
    record["disc"] = disc_terms
    state.step += 1
    return record


def train_stage2(pairset: GeneratedPairSet, corpus: UnpairedCorpus | None, cfg: Stage2Config,
                 state: TrainState | None = None, until: int | None = None) -> TrainState:
    """Run (or continue) stage-two training up to ``until`` (default ``total_steps``)."""
    if not pairset.pairs:
        raise ConfigError("stage 2 needs a non-empty generated pair set")
    if cfg.needs_real_lr and (corpus is None or not corpus.lr_paths):
        raise ConfigError(f"ablation {cfg.ablation!r} with these weights needs a real-LR corpus")
    if pairset.scale != cfg.sr.scale:
        raise ConfigError(f"pair set is x{pairset.scale} but the SR network is x{cfg.sr.scale}")
    if state is None:
        state = init_stage2(cfg)
    until = cfg.total_steps if until is None else until
    while state.step < until:
        step = state.step
        try:
            record = stage2_step(state, pairset, corpus)
        except NumericError:
            if cfg.out_dir:
                save_checkpoint(state, Path(cfg.out_dir) / f"diverged_step{step}.ckpt")
            log.error("stage 2 diverged at step %d", step)
            raise
        state.history.append(record)
        if step % cfg.log_every == 0 or state.step == until:
            log.info("stage2 %s", record)
            write_log(cfg.log_path, record)
        if cfg.checkpoint_every and cfg.out_dir and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(cfg.out_dir) / f"stage2_step{state.step}.ckpt")
    return state


def load_stage2(path) -> TrainState:
    from .config import stage2_from_dict

    header, entries = read_checkpoint(path)
    if header["stage"] != 2:
        raise ValueError(f"{path} is a stage-{header['stage']} checkpoint")
    state = init_stage2(stage2_from_dict(header["config"]))
    restore_into(state, header, entries)
    return state


def _feather(n: int, overlap: int, lead: bool, trail: bool) -> np.ndarray:
    # zero weight on the outer half of the overlap at interior edges, where
    # padding artefacts live, then a linear ramp over the inner half; a
    # neighbouring tile overlaps by at least ``overlap`` so coverage is kept
    w = np.ones(n)
    margin = overlap // 2
    ramp = np.concatenate([np.zeros(margin), (np.arange(overlap - margin) + 0.5) / (overlap - margin)])
    if lead and overlap:
        w[:overlap] = ramp
    if trail and overlap:
        w[n - overlap:] = ramp[::-1]
    return w


def _tile_starts(n: int, tile: int, overlap: int) -> list[int]:
    if n <= tile:
        return [0]
    starts = list(range(0, n - tile, tile - overlap))
    starts.append(n - tile)
    return sorted(set(starts))


def super_resolve(model, img: np.ndarray, tile: int = 128, overlap: int = 16) -> np.ndarray:
    """Upscale ``img`` with the SR network of ``model`` (a stage-two
    TrainState or the network itself).

    Inputs larger than ``tile`` are processed in overlapping tiles whose
    outputs are blended with linear feathering across the overlaps.
    """
    net = model.nets["R"] if isinstance(model, TrainState) else model
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 4:
        raise ValueError(f"expected (batch, 3, H, W), got {img.shape}")
    h, w = img.shape[-2:]
    if h < 8 or w < 8:
        raise ValueError(f"input {h}x{w} is smaller than 8x8")
    s = net.spec.scale
    if tile < 2 * overlap + 1:
        raise ValueError("tile must exceed twice the overlap")
    with torch.no_grad():
        if h <= tile and w <= tile:
            out = net(to_tensor(img))[0].numpy()
            return np.clip(out, 0.0, 1.0)
        acc = np.zeros((img.shape[0], 3, h * s, w * s))
        norm = np.zeros((h * s, w * s))
        ys, xs = _tile_starts(h, tile, overlap), _tile_starts(w, tile, overlap)
        for y in ys:
            for x in xs:
                th, tw = min(tile, h), min(tile, w)
                patch = img[..., y:y + th, x:x + tw]
                out = net(to_tensor(patch))[0].numpy().astype(np.float64)
                wy = _feather(th * s, overlap * s, y > 0, y + th < h)
                wx = _feather(tw * s, overlap * s, x > 0, x + tw < w)
                wt = np.outer(wy, wx)
                acc[..., y * s:(y + th) * s, x * s:(x + tw) * s] += out * wt
                norm[y * s:(y + th) * s, x * s:(x + tw) * s] += wt
    return np.clip(acc / norm, 0.0, 1.0).astype(np.float32)
