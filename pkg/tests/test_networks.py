import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_difference_grad, conv_out, receptive_field
from unpaired_sr.errors import ShapeError, SpecError
from unpaired_sr.networks import (GeneratorSpec, ParamStore, PatchDiscSpec, SRNetSpec, build,
                                  build_generator, build_patch_discriminator, build_sr_network,
                                  forward, parameter_count)

MINI_G = GeneratorSpec(n_res_blocks=2, channels=8)
MINI_SR = SRNetSpec(n_groups=1, n_blocks_per_group=1, channels=8, ca_reduction=4, scale=2)
MINI_D = PatchDiscSpec(base_channels=4, n_down=2)


def rand(*shape, seed=0, dtype=torch.float32):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=dtype)


# ---- generator -------------------------------------------------------------

@pytest.mark.parametrize("seed", [0, 7])
def test_fresh_generator_is_identity(seed):
    g = build_generator(MINI_G, seed)
    x = rand(2, 3, 13, 17, seed=seed)
    with torch.no_grad():
        assert torch.equal(g(x), x)


def test_default_generator_is_identity():
    g = build_generator(GeneratorSpec(), 3)
    x = rand(1, 3, 16, 16)
    with torch.no_grad():
        assert torch.equal(g(x), x)


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 20), st.integers(1, 20))
def test_generator_preserves_shape(h, w):
    g = build_generator(MINI_G, 0)
    with torch.no_grad():
        assert g(rand(1, 3, h, w)).shape == (1, 3, h, w)


def test_generator_requires_skip():
    with pytest.raises(SpecError):
        build_generator(GeneratorSpec(global_skip=False))


# ---- SR network --------------------------------------------------------------

@pytest.mark.parametrize("scale", [2, 3, 4])
def test_sr_output_scale(scale):
    spec = SRNetSpec(n_groups=1, n_blocks_per_group=1, channels=8, ca_reduction=4, scale=scale)
    net = build_sr_network(spec, 0)
    with torch.no_grad():
        sr, feat = net(rand(2, 3, 9, 11))
    assert sr.shape == (2, 3, 9 * scale, 11 * scale)
    assert feat.shape == (2, 8, 9, 11)


@pytest.mark.parametrize("tap", ["after_shallow", 1, 2])
def test_tap_points(tap):
    spec = SRNetSpec(n_groups=2, n_blocks_per_group=1, channels=8, ca_reduction=4, scale=2,
                     tap_point=tap)
    net = build_sr_network(spec, 0)
    x = rand(1, 3, 6, 6)
    with torch.no_grad():
        _, feat = net(x)
        expected = net.shallow(x)
        for k, group in enumerate(net.groups, start=1):
            if tap == "after_shallow":
                break
            expected = group(expected)
            if k == tap:
                break
    torch.testing.assert_close(feat, expected, rtol=0, atol=0)


@pytest.mark.parametrize("spec", [
    SRNetSpec(scale=5), SRNetSpec(ca_reduction=128), SRNetSpec(ca_reduction=0),
    SRNetSpec(tap_point=6), SRNetSpec(tap_point="middle")])
def test_sr_spec_errors(spec):
    with pytest.raises(SpecError):
        build_sr_network(spec)


def test_channel_attention_gate_half_at_zero_excitation():
    net = build_sr_network(MINI_SR, 0)
    att = net.groups[0].blocks[0].attention
    with torch.no_grad():
        att.excite.weight.zero_()
        att.excite.bias.zero_()
        gate = att.gate(rand(2, 8, 5, 5))
    assert torch.equal(gate, torch.full_like(gate, 0.5))


def test_rcan_preset():
    spec = SRNetSpec.rcan()
    assert (spec.n_groups, spec.n_blocks_per_group, spec.channels) == (10, 20, 64)


# ---- discriminator ---------------------------------------------------------

def test_patchgan_map_size_64():
    d = build_patch_discriminator(PatchDiscSpec(), 0)
    with torch.no_grad():
        out = d(rand(1, 3, 64, 64))
    assert out.shape == (1, 1, 6, 6)
    assert d.output_size(64) == 6


def test_patchgan_receptive_field_oracle():
    geom = PatchDiscSpec().layer_geometry()
    assert receptive_field([(k, s) for k, s, _ in geom]) == (70, 8)
    assert len(geom) == 5


@pytest.mark.parametrize("n", [24, 32, 64, 70, 96, 128])
@pytest.mark.parametrize("n_down", [1, 2, 3])
def test_patchgan_map_size_conv_arithmetic(n, n_down):
    spec = PatchDiscSpec(base_channels=4, n_down=n_down)
    expected = n
    for k, s, p in spec.layer_geometry():
        expected = conv_out(expected, k, s, p)
    d = build_patch_discriminator(spec, 0)
    with torch.no_grad():
        assert d(rand(1, 3, n, n)).shape[-1] == expected == d.output_size(n)


def test_patchgan_gradient_support_is_70px():
    # without instance norm each logit depends on its receptive field only
    spec = PatchDiscSpec(base_channels=4, n_down=3, norm=False)
    d = build_patch_discriminator(spec, 1).double()
    x = rand(1, 3, 160, 160, dtype=torch.float64).requires_grad_()
    out = d(x)
    i = out.shape[-1] // 2
    out[0, 0, i, i].backward()
    support = x.grad.abs().sum(dim=(0, 1)) > 0
    rows = support.any(dim=1).nonzero().flatten()
    cols = support.any(dim=0).nonzero().flatten()
    assert rows.max() - rows.min() + 1 == 70
    assert cols.max() - cols.min() + 1 == 70
    assert rows.min() == 8 * i - 23


def test_feature_discriminator():
    spec = PatchDiscSpec(base_channels=4, n_down=2, input_kind="feature", in_channels=8)
    d = build_patch_discriminator(spec, 0)
    with torch.no_grad():
        assert d(rand(2, 8, 24, 24)).shape == (2, 1, 4, 4)
    with pytest.raises(SpecError):
        build_patch_discriminator(PatchDiscSpec(input_kind="audio"))


# ---- shared contracts --------------------------------------------------------

@pytest.mark.parametrize("spec,n", [(MINI_G, 10), (MINI_SR, 10), (MINI_D, 24),
                                    (GeneratorSpec(), 12), (PatchDiscSpec(), 64)])
def test_batch_equivalence(spec, n):
    net = build(spec, 5)
    x = rand(3, 3, n, n, seed=2)

    def first(y):
        return y[0] if isinstance(y, tuple) else y

    with torch.no_grad():
        whole = first(net(x))
        parts = torch.cat([first(net(x[i:i + 1])) for i in range(3)])
    torch.testing.assert_close(whole, parts, rtol=1e-5, atol=1e-6)


@pytest.mark.parametrize("spec", [MINI_G, MINI_SR, MINI_D, GeneratorSpec(), SRNetSpec(),
                                  SRNetSpec(scale=3), SRNetSpec.rcan(2), PatchDiscSpec(),
                                  PatchDiscSpec(base_channels=16, n_down=2)])
def test_parameter_count_closed_form(spec):
    net = build(spec, 0)
    assert parameter_count(spec) == sum(p.numel() for p in net.parameters())


def test_parameter_count_defaults():
    assert parameter_count(GeneratorSpec()) == 594_371
    assert parameter_count(SRNetSpec()) == 4_242_315
    assert parameter_count(PatchDiscSpec()) == 2_764_737


def test_build_is_deterministic():
    a = ParamStore.from_module(build(MINI_SR, 3)).checksum()
    b = ParamStore.from_module(build(MINI_SR, 3)).checksum()
    c = ParamStore.from_module(build(MINI_SR, 4)).checksum()
    assert a == b != c


def test_paramstore_round_trip():
    src = build(MINI_SR, 1)
    store = ParamStore.from_module(src)
    dst = build(MINI_SR, 2)
    store.load_into(dst)
    again = ParamStore.from_module(dst)
    assert again.checksum() == store.checksum()
    for a, b in zip(store.to_arrays().values(), again.to_arrays().values()):
        assert a.tobytes() == b.tobytes()
    assert store.n_params() == parameter_count(MINI_SR)


def test_paramstore_mismatch():
    store = ParamStore.from_module(build(MINI_G, 0))
    with pytest.raises(ShapeError):
        store.load_into(build(GeneratorSpec(n_res_blocks=2, channels=4), 0))
    with pytest.raises(ShapeError):
        store.load_into(build(GeneratorSpec(n_res_blocks=3, channels=8), 0))


def test_functional_forward_matches_module():
    net = build(MINI_SR, 0)
    x = rand(1, 3, 7, 7)
    with torch.no_grad():
        ref = net(x)
        out = forward(ParamStore.from_module(net), MINI_SR, x)
    assert torch.equal(ref[0], out[0]) and torch.equal(ref[1], out[1])


def test_functional_forward_shape_error_names_layer():
    params = ParamStore.from_module(build(MINI_G, 0))
    with pytest.raises(ShapeError, match="head"):
        forward(params, MINI_G, rand(1, 4, 8, 8))


# ---- finite differences ------------------------------------------------------

def _perturb(net, seed):
    # randomise zero-initialised layers so every parameter has a gradient
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))


@pytest.mark.parametrize("spec,n", [(MINI_G, 6), (MINI_SR, 5), (MINI_D, 16)])
def test_network_gradients_finite_differences(spec, n):
    net = build(spec, 0).double()
    _perturb(net, 1)
    x = rand(2, 3, n, n, seed=3, dtype=torch.float64).requires_grad_()

    def first(y):
        return y[0] if isinstance(y, tuple) else y

    with torch.no_grad():
        proj = torch.randn(first(net(x)).shape, generator=torch.Generator().manual_seed(4),
                           dtype=torch.float64)

    def loss():
        return (first(net(x)) * proj).sum()

    params = list(net.parameters())
    loss().backward()
    analytic = [x.grad] + [p.grad for p in params]
    numeric = central_difference_grad(loss, [x.detach()] + [p.data for p in params])
    # biases feeding an instance norm have an exactly zero gradient, so the
    # error is taken relative to the largest gradient entry overall
    scale = max(float(b.abs().max()) for b in numeric)
    for a, b in zip(analytic, numeric):
        assert float((a - b).abs().max()) / scale < 1e-4
