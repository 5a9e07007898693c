"""Network definitions: degradation generators, the channel-attention SR
network with its feature tap, and PatchGAN discriminators.

Each network is described by a frozen spec dataclass. ``build_*`` returns an
initialised ``torch.nn.Module``; :class:`ParamStore` is the ordered,
serialisable name -> tensor view of its parameters, and :func:`forward`
evaluates any spec against an explicit ``ParamStore``.
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.func import functional_call

from .errors import ShapeError, SpecError

TapPoint = Union[str, int]


@dataclass(frozen=True)
class GeneratorSpec:
    n_res_blocks: int = 8
    channels: int = 64
    global_skip: bool = True


@dataclass(frozen=True)
class SRNetSpec:
    n_groups: int = 5
    n_blocks_per_group: int = 10
    channels: int = 64
    ca_reduction: int = 16
    scale: int = 4
    # "after_shallow" or the 1-based index of a residual group
    tap_point: TapPoint = 1

    @classmethod
    def rcan(cls, scale: int = 4) -> "SRNetSpec":
        """Full-size configuration of the original channel-attention network."""
        return cls(n_groups=10, n_blocks_per_group=20, channels=64, ca_reduction=16,
                   scale=scale)


@dataclass(frozen=True)
class PatchDiscSpec:
    base_channels: int = 64
    n_down: int = 3
    input_kind: str = "image"
    in_channels: int = 3
    norm: bool = True

    def layer_geometry(self) -> list[tuple[int, int, int]]:
        """(kernel, stride, padding) of every convolution, input to output."""
        return [(4, 2, 1)] * self.n_down + [(4, 1, 1), (4, 1, 1)]


Spec = Union[GeneratorSpec, SRNetSpec, PatchDiscSpec]


def _make_generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    return torch.Generator().manual_seed(int(seed))


def _init_conv(conv: nn.Conv2d, gen: torch.Generator, gain: float = 1.0,
               zero: bool = False) -> None:
    with torch.no_grad():
        if zero:
            conv.weight.zero_()
        else:
            fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
            nn.init.normal_(conv.weight, 0.0, gain / math.sqrt(fan_in), generator=gen)
        if conv.bias is not None:
            conv.bias.zero_()


def _conv3(cin: int, cout: int) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, 3, padding=1)


_RELU_GAIN = math.sqrt(2.0)
_LEAKY_GAIN = math.sqrt(2.0 / (1 + 0.2**2))


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = _conv3(channels, channels)
        self.conv2 = _conv3(channels, channels)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class Generator(nn.Module):
    """Resolution-preserving residual CNN with a global input-output skip."""

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        if spec.channels < 1:
            raise SpecError("generator needs at least one channel")
        if not spec.global_skip:
            raise SpecError("degradation generators always use the global skip")
        self.spec = spec
        self.head = _conv3(3, spec.channels)
        self.body = nn.Sequential(*[ResBlock(spec.channels) for _ in range(spec.n_res_blocks)])
        self.tail = _conv3(spec.channels, 3)

    def reset_parameters(self, gen: torch.Generator) -> None:
        _init_conv(self.head, gen)
        for block in self.body:
            _init_conv(block.conv1, gen, _RELU_GAIN)
            _init_conv(block.conv2, gen)
        # zero tail: a fresh generator is exactly the identity map
        _init_conv(self.tail, gen, zero=True)

    def forward(self, x):
        return x + self.tail(self.body(self.head(x)))


class ChannelAttention(nn.Module):
    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.squeeze = nn.Conv2d(channels, channels // reduction, 1)
        self.excite = nn.Conv2d(channels // reduction, channels, 1)

    def gate(self, x):
        pooled = x.mean(dim=(2, 3), keepdim=True)
        return torch.sigmoid(self.excite(F.relu(self.squeeze(pooled))))

    def forward(self, x):
        return x * self.gate(x)


class RCAB(nn.Module):
    """Residual block with channel attention."""

    def __init__(self, channels: int, reduction: int):
        super().__init__()
        self.conv1 = _conv3(channels, channels)
        self.conv2 = _conv3(channels, channels)
        self.attention = ChannelAttention(channels, reduction)

    def forward(self, x):
        return x + self.attention(self.conv2(F.relu(self.conv1(x))))


class ResidualGroup(nn.Module):
    def __init__(self, channels: int, reduction: int, n_blocks: int):
        super().__init__()
        self.blocks = nn.Sequential(*[RCAB(channels, reduction) for _ in range(n_blocks)])
        self.conv = _conv3(channels, channels)

    def forward(self, x):
        return x + self.conv(self.blocks(x))


class Upsampler(nn.Sequential):
    """Sub-pixel convolution stages reaching the requested integer scale."""

    def __init__(self, channels: int, scale: int):
        layers: list[nn.Module] = []
        if scale in (2, 4):
            for _ in range(int(math.log2(scale))):
                layers += [_conv3(channels, 4 * channels), nn.PixelShuffle(2)]
        elif scale == 3:
            layers += [_conv3(channels, 9 * channels), nn.PixelShuffle(3)]
        else:
            raise SpecError(f"unsupported scale {scale}")
        super().__init__(*layers)


class SRNetwork(nn.Module):
    """Channel-attention residual-in-residual SR network.

    ``forward`` returns ``(sr, features)`` where ``features`` is the
    intermediate activation selected by ``spec.tap_point``.
    """

    def __init__(self, spec: SRNetSpec):
        super().__init__()
        if spec.scale not in (2, 3, 4):
            raise SpecError(f"scale must be 2, 3 or 4, got {spec.scale}")
        if spec.ca_reduction < 1 or spec.ca_reduction > spec.channels:
            raise SpecError(
                f"channel-attention reduction {spec.ca_reduction} incompatible with "
                f"{spec.channels} channels")
        tap = spec.tap_point
        if tap != "after_shallow" and not (isinstance(tap, int) and 1 <= tap <= spec.n_groups):
            raise SpecError(f"invalid tap point {tap!r}")
        self.spec = spec
        c = spec.channels
        self.shallow = _conv3(3, c)
        self.groups = nn.ModuleList(
            [ResidualGroup(c, spec.ca_reduction, spec.n_blocks_per_group)
             for _ in range(spec.n_groups)])
        self.body_conv = _conv3(c, c)
        self.upsample = Upsampler(c, spec.scale)
        self.tail = _conv3(c, 3)

    def reset_parameters(self, gen: torch.Generator) -> None:
        _init_conv(self.shallow, gen)
        for group in self.groups:
            for block in group.blocks:
                _init_conv(block.conv1, gen, _RELU_GAIN)
                _init_conv(block.conv2, gen)
                _init_conv(block.attention.squeeze, gen, _RELU_GAIN)
                _init_conv(block.attention.excite, gen)
            _init_conv(group.conv, gen)
        _init_conv(self.body_conv, gen)
        for layer in self.upsample:
            if isinstance(layer, nn.Conv2d):
                _init_conv(layer, gen)
        _init_conv(self.tail, gen)

    def forward(self, x):
        shallow = self.shallow(x)
        feat = shallow
        tapped = shallow if self.spec.tap_point == "after_shallow" else None
        for k, group in enumerate(self.groups, start=1):
            feat = group(feat)
            if k == self.spec.tap_point:
                tapped = feat
        feat = self.body_conv(feat) + shallow
        return self.tail(self.upsample(feat)), tapped


class PatchDiscriminator(nn.Module):
    """Fully convolutional discriminator emitting one raw logit per patch."""

    def __init__(self, spec: PatchDiscSpec):
        super().__init__()
        if spec.input_kind not in ("image", "feature"):
            raise SpecError(f"unknown input kind {spec.input_kind!r}")
        self.spec = spec
        b = spec.base_channels
        widths = [spec.in_channels] + [b * min(2**i, 8) for i in range(spec.n_down + 1)]
        layers: list[nn.Module] = []
        for i, (k, s, p) in enumerate(spec.layer_geometry()[:-1]):
            layers.append(nn.Conv2d(widths[i], widths[i + 1], k, s, p))
            if i > 0 and spec.norm:
                layers.append(nn.InstanceNorm2d(widths[i + 1]))
            layers.append(nn.LeakyReLU(0.2))
        layers.append(nn.Conv2d(widths[-1], 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def reset_parameters(self, gen: torch.Generator) -> None:
        convs = [m for m in self.model if isinstance(m, nn.Conv2d)]
        for conv in convs[:-1]:
            _init_conv(conv, gen, _LEAKY_GAIN)
        _init_conv(convs[-1], gen)

    def forward(self, x):
        return self.model(x)

    def output_size(self, n: int) -> int:
        for k, s, p in self.spec.layer_geometry():
            n = (n + 2 * p - k) // s + 1
        return n


def _module_for(spec: Spec) -> nn.Module:
    if isinstance(spec, GeneratorSpec):
        return Generator(spec)
    if isinstance(spec, SRNetSpec):
        return SRNetwork(spec)
    if isinstance(spec, PatchDiscSpec):
        return PatchDiscriminator(spec)
    raise SpecError(f"unknown spec type {type(spec).__name__}")


def build(spec: Spec, seed=0) -> nn.Module:
    """Construct and deterministically initialise the network for ``spec``."""
    module = _module_for(spec)
    module.reset_parameters(_make_generator(seed))
    return module


def build_generator(spec: GeneratorSpec, seed=0) -> Generator:
    return build(spec, seed)


def build_sr_network(spec: SRNetSpec, seed=0) -> SRNetwork:
    return build(spec, seed)


def build_patch_discriminator(spec: PatchDiscSpec, seed=0) -> PatchDiscriminator:
    return build(spec, seed)


def parameter_count(spec: Spec) -> int:
    """Closed-form parameter count for a spec."""

    def conv(cin, cout, k):
        return cin * cout * k * k + cout

    if isinstance(spec, GeneratorSpec):
        c = spec.channels
        return conv(3, c, 3) + spec.n_res_blocks * 2 * conv(c, c, 3) + conv(c, 3, 3)
    if isinstance(spec, SRNetSpec):
        c, r = spec.channels, spec.channels // spec.ca_reduction
        block = 2 * conv(c, c, 3) + conv(c, r, 1) + conv(r, c, 1)
        group = spec.n_blocks_per_group * block + conv(c, c, 3)
        if spec.scale == 3:
            up = conv(c, 9 * c, 3)
        else:
            up = int(math.log2(spec.scale)) * conv(c, 4 * c, 3)
        return conv(3, c, 3) + spec.n_groups * group + conv(c, c, 3) + up + conv(c, 3, 3)
    b = spec.base_channels
    widths = [spec.in_channels] + [b * min(2**i, 8) for i in range(spec.n_down + 1)] + [1]
    return sum(conv(widths[i], widths[i + 1], 4) for i in range(len(widths) - 1))


class ParamStore(OrderedDict):
    """Ordered mapping of parameter name to tensor."""

    @classmethod
    def from_module(cls, module: nn.Module) -> "ParamStore":
        return cls((name, p.detach().clone()) for name, p in module.named_parameters())

    def n_params(self) -> int:
        return sum(t.numel() for t in self.values())

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.items():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
        return h.hexdigest()

    def to_arrays(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, v.detach().cpu().numpy()) for k, v in self.items())

    def load_into(self, module: nn.Module) -> None:
        own = dict(module.named_parameters())
        if set(own) != set(self):
            missing = sorted(set(own) - set(self))
            extra = sorted(set(self) - set(own))
            raise ShapeError(f"parameter names differ: missing {missing}, unexpected {extra}")
        with torch.no_grad():
            for name, p in own.items():
                if p.shape != self[name].shape:
                    raise ShapeError(f"{name}: shape {tuple(self[name].shape)}, "
                                     f"expected {tuple(p.shape)}")
                p.copy_(self[name])


def forward(params: ParamStore, spec: Spec, x: torch.Tensor):
    """Evaluate the network described by ``spec`` with the given parameters.

    Shape problems surface as :class:`ShapeError` naming the layer that
    rejected its input.
    """
    with torch.device("meta"):
        skeleton = _module_for(spec)
    current = ["<input>"]
    names = {m: n for n, m in skeleton.named_modules()}

    def note(module, _inputs):
        current[0] = names[module] or "<root>"

    for m in skeleton.modules():
        if not list(m.children()):
            m.register_forward_pre_hook(note)
    try:
        return functional_call(skeleton, dict(params), (x,))
    except RuntimeError as err:
        raise ShapeError(f"layer {current[0]!r} rejected input of shape "
                         f"{tuple(x.shape)}: {err}") from err
