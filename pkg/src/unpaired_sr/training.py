"""Machinery shared by both trainers: optimiser, learning-rate schedule,
train state and the binary checkpoint format."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch import nn

from .errors import NumericError

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"USRCKPT\x00"
FORMAT_VERSION = 1


def lr_at(step: int, cfg) -> float:
    """Step-wise halving schedule: ``lr0 * 0.5 ** (step // halve_every)``."""
    if step < 0:
        raise ValueError("step must be non-negative")
    return cfg.lr0 * 0.5 ** (step // cfg.halve_every)


def make_optimizer(module: nn.Module, lr: float) -> torch.optim.Adam:
    params = list(module.parameters())
    for p in params:
        if p.grad is None:
            p.grad = torch.zeros_like(p)
    return torch.optim.Adam(params, lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS, foreach=False)


def set_lr(optimizers, lr: float) -> None:
    for opt in optimizers:
        for group in opt.param_groups:
            group["lr"] = lr


def zero_grads(modules) -> None:
    # zeros rather than None so that an update with no gradient signal is
    # still an (exactly zero) Adam step
    for m in modules:
        for p in m.parameters():
            if p.grad is None:
                p.grad = torch.zeros_like(p)
            else:
                p.grad.zero_()


def requires_grad(modules, flag: bool) -> None:
    for m in modules:
        m.requires_grad_(flag)


def check_finite(values: dict[str, float]) -> None:
    bad = {k: v for k, v in values.items() if not np.isfinite(v)}
    if bad:
        raise NumericError(f"non-finite losses: {bad}")


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, Path):
        return str(obj)
    return obj


def config_dict(cfg) -> dict:
    return _jsonable(cfg)


def config_digest(cfg) -> str:
    """Digest of every field that influences training (run bookkeeping excluded)."""
    d = config_dict(cfg)
    for key in ("total_steps", "log_every", "checkpoint_every", "out_dir", "log_path"):
        d.pop(key, None)
    return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    """Everything needed to continue a run: parameters, Adam moments, data RNG."""

    stage: int
    step: int
    config: Any
    nets: dict[str, nn.Module]
    optimizers: dict[str, torch.optim.Adam]
    rng: np.random.Generator
    history: list[dict] = field(default_factory=list)

    @property
    def provenance(self) -> str:
        return f"stage{self.stage}-step{self.step}-{config_digest(self.config)}"

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.nets):
            for pname, p in self.nets[name].named_parameters():
                h.update(f"{name}/{pname}".encode())
                h.update(p.detach().numpy().tobytes())
        return h.hexdigest()


def _entries(state: TrainState):
    for name, net in state.nets.items():
        opt = state.optimizers[name]
        for pname, p in net.named_parameters():
            yield f"net/{name}/{pname}", p.detach()
        for pname, p in net.named_parameters():
            st = opt.state.get(p, {})
            for moment in ("exp_avg", "exp_avg_sq"):
                yield f"adam/{name}/{pname}/{moment}", st.get(moment, torch.zeros_like(p))


def _adam_steps(state: TrainState) -> dict[str, int]:
    steps = {}
    for name, opt in state.optimizers.items():
        counts = {int(st["step"]) for st in opt.state.values() if "step" in st}
        steps[name] = counts.pop() if counts else 0
    return steps


def save_checkpoint(state: TrainState, path) -> None:
    """Header (JSON) followed by named little-endian float32 tensors."""
    header = {
        "format_version": FORMAT_VERSION,
        "stage": state.stage,
        "step": state.step,
        "config_digest": config_digest(state.config),
        "seed": state.config.seed,
        "config": config_dict(state.config),
        "rng_state": state.rng.bit_generator.state,
        "adam_steps": _adam_steps(state),
        "nets": list(state.nets),
    }
    blob = json.dumps(header).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, tensor in _entries(state):
            arr = tensor.detach().cpu().numpy().astype("<f4", copy=False)
            encoded = name.encode()
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(b"f32\x00")
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())
    tmp.replace(path)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Parse a checkpoint into its header and an ordered name -> array map."""
    data = Path(path).read_bytes()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ValueError(f"{path}: not a checkpoint file")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos:pos + hlen])
    pos += hlen
    if header.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {header.get('format_version')}")
    entries: dict[str, np.ndarray] = {}
    while pos < len(data):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        tag = data[pos:pos + 4]
        pos += 4
        if tag != b"f32\x00":
            raise ValueError(f"{path}: entry {name} has unknown dtype tag {tag!r}")
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        entries[name] = arr.astype(np.float32)
    return header, entries


def restore_into(state: TrainState, header: dict, entries: dict[str, np.ndarray]) -> None:
    """Load parameters, optimiser moments and RNG state into a freshly built state."""
    state.step = int(header["step"])
    state.rng.bit_generator.state = header["rng_state"]
    steps = header["adam_steps"]
    with torch.no_grad():
        for name, net in state.nets.items():
            opt = state.optimizers[name]
            for pname, p in net.named_parameters():
                p.copy_(torch.from_numpy(entries[f"net/{name}/{pname}"]))
                if steps.get(name, 0) > 0:
                    opt.state[p] = {
                        "step": torch.tensor(float(steps[name])),
                        "exp_avg": torch.from_numpy(
                            entries[f"adam/{name}/{pname}/exp_avg"].copy()),
                        "exp_avg_sq": torch.from_numpy(
                            entries[f"adam/{name}/{pname}/exp_avg_sq"].copy()),
                    }


def write_log(path, record: dict) -> None:
    if path is None:
        return
    with open(path, "a") as fh:
        fh.write(json.dumps(record) + "\n")


def to_tensor(x: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))


class ImagePool:
    """History buffer of generated images for discriminator updates (off by default)."""

    def __init__(self, size: int, rng: np.random.Generator):
        self.size = size
        self.rng = rng
        self.images: list[torch.Tensor] = []

    def query(self, batch: torch.Tensor) -> torch.Tensor:
        if self.size == 0:
            return batch
        out = []
        for img in batch:
            img = img.detach().clone()
            if len(self.images) < self.size:
                self.images.append(img)
                out.append(img)
            elif self.rng.random() < 0.5:
                k = int(self.rng.integers(self.size))
                out.append(self.images[k])
                self.images[k] = img
            else:
                out.append(img)
        return torch.stack(out)
