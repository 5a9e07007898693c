"""Stage one: learn a degradation generator G mapping bicubic LR images into
the real-LR domain, with a reverse network F and two patch discriminators."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import datasets, imaging
from .datasets import GeneratedPairSet, UnpairedCorpus
from .errors import ConfigError, NumericError
from .losses import DISCRIMINATOR, GENERATOR, LossWeights, cycle_loss, gan_loss, stage1_objective
from .networks import GeneratorSpec, PatchDiscSpec, build
from .training import (ImagePool, TrainState, check_finite, lr_at, make_optimizer,
                       read_checkpoint, requires_grad, restore_into, save_checkpoint, set_lr,
                       to_tensor, write_log, zero_grads)

log = logging.getLogger(__name__)

STAGE1_ABLATIONS = ("full", "one_cycle", "gan_only")

# per-network seed offsets, so that building or skipping one network never
# changes the initialisation of another
_NET_SEEDS = {"G": 11, "F": 12, "D_real": 13, "D_syn": 14}


@dataclass(frozen=True)
class Stage1Config:
    total_steps: int
    batch: int = 8
    patch_lr: int = 64
    lr0: float = 1e-4
    halve_every: int = 1_600_000
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    d_steps_per_g_step: int = 1
    ablation: str = "full"
    generator: GeneratorSpec = field(default_factory=GeneratorSpec)
    discriminator: PatchDiscSpec = field(default_factory=PatchDiscSpec)
    history_pool: int = 0
    augment: bool = False
    log_every: int = 100
    checkpoint_every: int = 0
    out_dir: str | None = None
    log_path: str | None = None

    def __post_init__(self):
        for name in ("total_steps", "batch", "patch_lr", "halve_every", "d_steps_per_g_step"):
            if getattr(self, name) < 1:
                raise ConfigError(f"stage1.{name} must be positive")
        if not self.lr0 > 0:
            raise ConfigError("stage1.lr0 must be positive")
        if self.ablation not in STAGE1_ABLATIONS:
            raise ConfigError(f"stage1.ablation must be one of {STAGE1_ABLATIONS}")

    @property
    def effective_weights(self) -> LossWeights:
        if self.ablation == "gan_only":
            return replace(self.weights, w2=0.0, w3=0.0)
        if self.ablation == "one_cycle":
            return replace(self.weights, w2=0.0)
        return self.weights

    @property
    def uses_reverse(self) -> bool:
        return self.ablation != "gan_only"

    @property
    def uses_d_syn(self) -> bool:
        return self.ablation == "full"


def init_stage1(cfg: Stage1Config) -> TrainState:
    nets = {"G": build(cfg.generator, cfg.seed * 1000 + _NET_SEEDS["G"]),
            "D_real": build(cfg.discriminator, cfg.seed * 1000 + _NET_SEEDS["D_real"])}
    if cfg.uses_reverse:
        nets["F"] = build(cfg.generator, cfg.seed * 1000 + _NET_SEEDS["F"])
    if cfg.uses_d_syn:
        nets["D_syn"] = build(cfg.discriminator, cfg.seed * 1000 + _NET_SEEDS["D_syn"])
    optimizers = {name: make_optimizer(net, cfg.lr0) for name, net in nets.items()}
    return TrainState(stage=1, step=0, config=cfg, nets=nets, optimizers=optimizers,
                      rng=np.random.default_rng(cfg.seed))


def _batch(corpus, cfg, rng):
    syn, real = datasets.stage1_batch(corpus, cfg.batch, cfg.patch_lr, rng)
    if cfg.augment:
        syn = np.concatenate([imaging.augment(x[None], rng) for x in syn])
        real = np.concatenate([imaging.augment(x[None], rng) for x in real])
    return to_tensor(syn), to_tensor(real)


def stage1_step(state: TrainState, corpus: UnpairedCorpus, pools=None) -> dict:
    """One alternating update: discriminators first, then G and F jointly."""
    cfg: Stage1Config = state.config
    weights = cfg.effective_weights
    nets = state.nets
    G, F, D_real, D_syn = nets["G"], nets.get("F"), nets["D_real"], nets.get("D_syn")
    gens = [G] + ([F] if F is not None else [])
    discs = [D_real] + ([D_syn] if D_syn is not None else [])

    set_lr(state.optimizers.values(), lr_at(state.step, cfg))
    x_syn, x_real = _batch(corpus, cfg, state.rng)

    # generator forward passes are shared by the D and G updates of this step
    gen = G(x_syn)
    fake_syn = F(x_real) if cfg.uses_d_syn else None
    gen_d = gen.detach()
    fake_syn_d = fake_syn.detach() if fake_syn is not None else None
    if pools is not None:
        gen_d = pools["real"].query(gen_d)
        if fake_syn_d is not None:
            fake_syn_d = pools["syn"].query(fake_syn_d)

    requires_grad(discs, True)
    disc_terms: dict[str, float] = {}
    for _ in range(cfg.d_steps_per_g_step):
        zero_grads(discs)
        d_loss = gan_loss(D_real(x_real), D_real(gen_d), DISCRIMINATOR)
        disc_terms["d_real"] = float(d_loss.detach())
        if D_syn is not None:
            d_syn_loss = gan_loss(D_syn(x_syn), D_syn(fake_syn_d), DISCRIMINATOR)
            disc_terms["d_syn"] = float(d_syn_loss.detach())
            d_loss = d_loss + d_syn_loss
        check_finite(disc_terms)
        d_loss.backward()
        for name in ("D_real", "D_syn"):
            if name in nets:
                state.optimizers[name].step()

    requires_grad(discs, False)
    zero_grads(gens)
    components = {}
    with torch.no_grad():
        d_on_real = D_real(x_real)
    components["gan_g"] = gan_loss(d_on_real, D_real(gen), GENERATOR)
    if D_syn is not None:
        with torch.no_grad():
            d_on_syn = D_syn(x_syn)
        components["gan_f"] = gan_loss(d_on_syn, D_syn(fake_syn), GENERATOR)
    if F is not None:
        if cfg.ablation == "one_cycle":
            components["cycle"] = cycle_loss(x_syn, F(gen))
        else:
            components["cycle"] = cycle_loss(x_syn, F(gen), x_real, G(fake_syn))
    report = stage1_objective(components, weights)
    if report.loss is not None:
        report.loss.backward()
    for name in ("G", "F"):
        if name in nets:
            state.optimizers[name].step()
    requires_grad(discs, True)

    record = report.record(state.step)
    record["disc"] = disc_terms
    state.step += 1
    return record


def train_stage1(corpus: UnpairedCorpus, cfg: Stage1Config,
                 state: TrainState | None = None, until: int | None = None) -> TrainState:
    """Run (or continue) stage-one training up to ``until`` (default ``total_steps``)."""
    if state is None:
        state = init_stage1(cfg)
    until = cfg.total_steps if until is None else until
    pools = None
    if cfg.history_pool > 0:
        pools = {"real": ImagePool(cfg.history_pool, state.rng),
                 "syn": ImagePool(cfg.history_pool, state.rng)}
    while state.step < until:
        step = state.step
        try:
            record = stage1_step(state, corpus, pools)
        except NumericError:
            if cfg.out_dir:
                save_checkpoint(state, Path(cfg.out_dir) / f"diverged_step{step}.ckpt")
            log.error("stage 1 diverged at step %d", step)
            raise
        state.history.append(record)
        if step % cfg.log_every == 0 or state.step == until:
            log.info("stage1 %s", record)
            write_log(cfg.log_path, record)
        if cfg.checkpoint_every and cfg.out_dir and state.step % cfg.checkpoint_every == 0:
            save_checkpoint(state, Path(cfg.out_dir) / f"stage1_step{state.step}.ckpt")
    return state


def load_stage1(path) -> TrainState:
    from .config import stage1_from_dict

    header, entries = read_checkpoint(path)
    if header["stage"] != 1:
        raise ValueError(f"{path} is a stage-{header['stage']} checkpoint")
    state = init_stage1(stage1_from_dict(header["config"]))
    restore_into(state, header, entries)
    return state


def _centre_crop_to_multiple(img: np.ndarray, s: int) -> np.ndarray:
    h, w = img.shape[-2:]
    nh, nw = h - h % s, w - w % s
    top, left = (h - nh) // 2, (w - nw) // 2
    return img[..., top:top + nh, left:left + nw]


def apply_generator(generator, lr: np.ndarray) -> np.ndarray:
    if generator is None:
        return lr
    with torch.no_grad():
        out = generator(to_tensor(lr)).numpy()
    return np.clip(out, 0.0, 1.0)


def synthesize_lr_corpus(g_state, hr_paths, scale: int, out_dir) -> GeneratedPairSet:
    """Write ``clamp(G(bicubic(hr, 1/s)))`` for every HR image plus a manifest.

    ``g_state`` may be a stage-one :class:`TrainState`, a bare generator
    module, or None for the identity (pure bicubic) degradation.
    """
    out_dir = Path(out_dir)
    gen_dir = out_dir / "gen_lr"
    gen_dir.mkdir(parents=True, exist_ok=True)
    if isinstance(g_state, TrainState):
        generator, provenance = g_state.nets["G"], g_state.provenance
    elif g_state is None:
        generator, provenance = None, "identity"
    else:
        generator, provenance = g_state, "module"
    pairs = []
    for hr_path in hr_paths:
        hr_path = Path(hr_path)
        hr = datasets.load_cached(hr_path)
        cropped = _centre_crop_to_multiple(hr, scale)
        if cropped.shape != hr.shape:
            log.info("%s: centre-cropped %s -> %s for x%d divisibility", hr_path,
                     hr.shape[-2:], cropped.shape[-2:], scale)
            hr_dir = out_dir / "hr_cropped"
            hr_dir.mkdir(exist_ok=True)
            hr_path = hr_dir / (hr_path.stem + ".png")
            imaging.save_image(cropped, hr_path)
        syn = imaging.bicubic_resize(cropped.astype(np.float64), 1.0 / scale).astype(np.float32)
        gen = apply_generator(generator, syn)
        gen_path = gen_dir / (hr_path.stem + ".png")
        imaging.save_image(gen, gen_path)
        pairs.append((gen_path.resolve(), hr_path.resolve()))
    pairset = GeneratedPairSet(tuple(pairs), provenance, scale)
    pairset.write_manifest(out_dir / "pairs.tsv")
    return pairset
