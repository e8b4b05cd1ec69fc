import math

import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from ammnet.gradcheck import central_diff, rel_err, run_gradcheck, tiny_generator
from ammnet.generator import Generator, GeneratorConfig
from ammnet.layers import DDRBlock, Modulation, fuse_add, init_uniform_, modulate, modulation_grad_identity

DT = torch.float64


def rand(*shape, g):
    return torch.randn(*shape, generator=g, dtype=DT)


def zero_(module):
    with torch.no_grad():
        for p in module.parameters():
            p.zero_()
    return module


def small_cfg(**kw):
    base = dict(channels=4, dims=(8, 8, 8), num_classes=3, image_size=(16, 16), rgb_widths=(4, 4, 4, 4))
    base.update(kw)
    return GeneratorConfig(**base)


def small_inputs(seed=0, batch=1):
    g = torch.Generator().manual_seed(seed)
    rgb = torch.rand(batch, 3, 16, 16, generator=g)
    tsdf = torch.rand(batch, 8, 8, 8, generator=g) * 2 - 1
    pix2vox = torch.randint(-1, 512, (batch, 16, 16), generator=g)
    return rgb, tsdf, pix2vox


# -- modulation forward -------------------------------------------------------------

def test_modulate_matches_scalar_loop():
    g = torch.Generator().manual_seed(0)
    for _ in range(20):
        v, ms, mb = (rand(2, 3, 3, 3, g=g) for _ in range(3))
        out = modulate(v, ms, mb)
        for idx in [(a, b, c, d) for a in range(2) for b in range(3) for c in range(3) for d in range(3)]:
            s = 1.0 / (1.0 + math.exp(-float(ms[idx])))
            assert abs(float(out[idx]) - (float(v[idx]) * (1 + s) + float(mb[idx]))) < 1e-6


def test_modulate_zero_maps_and_zero_input():
    g = torch.Generator().manual_seed(1)
    v = rand(2, 3, 3, 3, g=g)
    z = torch.zeros_like(v)
    assert torch.equal(modulate(v, z, z), 1.5 * v)
    mb = rand(2, 3, 3, 3, g=g)
    assert torch.equal(modulate(z, rand(2, 3, 3, 3, g=g), mb), mb)
    with pytest.raises(ValueError):
        modulate(v, z[:1], z)


def test_modulation_module_with_zero_params_scales_by_1_5():
    m = zero_(Modulation(3).double())
    g = torch.Generator().manual_seed(2)
    v, cond = rand(1, 3, 4, 4, 4, g=g), rand(1, 3, 4, 4, 4, g=g)
    assert torch.equal(m(v, cond), 1.5 * v)


def test_fuse_add_matches_loop():
    g = torch.Generator().manual_seed(3)
    a, b = rand(2, 2, 2, 2, g=g), rand(2, 2, 2, 2, g=g)
    out = fuse_add(a, b)
    for idx in torch.cartesian_prod(*(torch.arange(2),) * 4).tolist():
        assert float(out[tuple(idx)]) == float(a[tuple(idx)]) + float(b[tuple(idx)])
    assert torch.equal(fuse_add(a, torch.zeros_like(a)), a)
    assert torch.count_nonzero(fuse_add(a, -a)) == 0
    with pytest.raises(ValueError):
        fuse_add(a, b[:1])


# -- modulation gradients -------------------------------------------------------------

def test_grad_identity_values():
    g = torch.full((2, 2), 2.0, dtype=DT)
    assert torch.equal(modulation_grad_identity(g, torch.zeros_like(g)), torch.full_like(g, 3.0))
    sat = modulation_grad_identity(g, torch.full_like(g, 40.0))
    assert torch.max(torch.abs(sat - 2 * g)) < 1e-12


def test_autograd_matches_closed_form_and_finite_differences():
    gen = torch.Generator().manual_seed(4)
    for _ in range(20):
        v = rand(2, 3, 3, 3, 3, g=gen).requires_grad_(True)
        ms, mb, up = (rand(2, 3, 3, 3, 3, g=gen) for _ in range(3))
        (grad,) = torch.autograd.grad(modulate(v, ms, mb), v, up)
        assert rel_err(grad, modulation_grad_identity(up, ms)) < 1e-8
        idx = list(range(0, v.numel(), 7))
        with torch.no_grad():
            num = central_diff(lambda: (modulate(v, ms, mb) * up).sum(), v, idx)
        assert rel_err(grad.reshape(-1)[idx], num) < 1e-5


def _grad_wrt_vr(fuse, v_r, v_t, up):
    v_r = v_r.clone().requires_grad_(True)
    (grad,) = torch.autograd.grad(fuse(v_r, v_t), v_r, up)
    return grad


def test_addition_gradient_is_upstream_and_ignores_vt():
    gen = torch.Generator().manual_seed(5)
    for _ in range(20):
        v_r, v_t, up, delta = (rand(1, 4, 3, 3, 3, g=gen) for _ in range(4))
        g1 = _grad_wrt_vr(fuse_add, v_r, v_t, up)
        g2 = _grad_wrt_vr(fuse_add, v_r, v_t + delta, up)
        assert torch.equal(g1, up)
        assert torch.equal(g1, g2)


def test_modulation_gradient_depends_on_vt():
    gen = torch.Generator().manual_seed(6)
    for case in range(20):
        m = init_uniform_(Modulation(4).double(), case)
        v_r, v_t, up, delta = (rand(1, 4, 3, 3, 3, g=gen) for _ in range(4))
        g1 = _grad_wrt_vr(m, v_r, v_t, up)
        g2 = _grad_wrt_vr(m, v_r, v_t + delta, up)
        assert float((g1 - g2).norm()) > 1e-6


def test_modulation_variants_split_forward_and_backward():
    gen = torch.Generator().manual_seed(7)
    full = init_uniform_(Modulation(3).double(), 0)
    v, cond, up = rand(1, 3, 2, 2, 2, g=gen), rand(1, 3, 2, 2, 2, g=gen), rand(1, 3, 2, 2, 2, g=gen)
    ms, mb = full.maps(cond)
    for variant in ("grad_only", "forward_only"):
        m = Modulation(3, variant).double()
        m.load_state_dict(full.state_dict())
        x = v.clone().requires_grad_(True)
        out = m(x, cond)
        (grad,) = torch.autograd.grad(out, x, up)
        if variant == "grad_only":
            assert torch.allclose(out, v + cond, atol=1e-12)
            assert torch.allclose(grad, modulation_grad_identity(up, ms), atol=1e-12)
        else:
            assert torch.allclose(out, modulate(v, ms, mb), atol=1e-12)
            assert torch.allclose(grad, up, atol=1e-12)
    with pytest.raises(ValueError):
        Modulation(3, "bogus")


# -- blocks and init --------------------------------------------------------------------

@settings(max_examples=10, deadline=None)
@given(dims=st.tuples(*(st.sampled_from([4, 8, 12]),) * 3), stride=st.sampled_from([1, 2]),
       dilation=st.sampled_from([1, 2]))
def test_ddr_shape_arithmetic(dims, stride, dilation):
    block = DDRBlock(4, 6, stride=stride, dilation=dilation)
    out = block(torch.rand(1, 4, *dims))
    assert out.shape == (1, 6, *(d // stride for d in dims))


def test_init_is_seeded_and_bounded():
    a = init_uniform_(nn.Conv3d(4, 5, 3), 3)
    b = init_uniform_(nn.Conv3d(4, 5, 3), 3)
    assert torch.equal(a.weight, b.weight)
    bound = math.sqrt(3.0 / (4 * 27))
    assert a.weight.abs().max().item() <= bound
    assert torch.count_nonzero(a.bias) == 0


# -- generator -----------------------------------------------------------------------------

def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(fusion_mode="addition")  # sites still set
    with pytest.raises(ValueError):
        small_cfg(sites=())  # modulation without sites
    with pytest.raises(ValueError):
        small_cfg(dims=(6, 8, 8))
    with pytest.raises(ValueError):
        small_cfg(modalities=("rgb",))
    with pytest.raises(ValueError):
        small_cfg(image_size=(20, 20))
    assert GeneratorConfig.from_dict(small_cfg().to_dict()) == small_cfg()


def test_shapes():
    net = Generator(small_cfg())
    rgb, tsdf, p2v = small_inputs(batch=2)
    feat, logits2d = net.encode_rgb(rgb)
    assert feat.shape == (2, 4, 4, 4) and logits2d.shape == (2, 4, 4, 4)
    assert net.encode_tsdf(tsdf).shape == (2, 4, 8, 8, 8)
    logits3d, _ = net(rgb, tsdf, p2v)
    assert logits3d.shape == (2, 4, 8, 8, 8)
    desk = Generator(GeneratorConfig())
    f, l2 = desk.encode_rgb(torch.zeros(1, 3, 64, 64))
    assert f.shape[-2:] == (16, 16) and l2.shape[1] == 12


def test_size_mismatch_errors():
    net = Generator(small_cfg())
    with pytest.raises(ValueError):
        net.encode_rgb(torch.zeros(1, 3, 32, 32))
    with pytest.raises(ValueError):
        net.encode_tsdf(torch.zeros(1, 8, 8, 4))


def test_zero_parameters_give_zero_outputs():
    net = zero_(Generator(small_cfg()))
    rgb, tsdf, p2v = small_inputs()
    assert torch.count_nonzero(net.encode_tsdf(tsdf)) == 0
    feat, _ = net.encode_rgb(torch.zeros_like(rgb))
    assert torch.count_nonzero(feat) == 0
    logits3d, logits2d = net(rgb, tsdf, p2v)
    assert torch.count_nonzero(logits3d) == 0 and torch.count_nonzero(logits2d) == 0


def test_forward_is_deterministic():
    a, b = Generator(small_cfg(seed=5)), Generator(small_cfg(seed=5))
    inputs = small_inputs(3)
    for x, y in zip(a(*inputs), b(*inputs)):
        assert torch.equal(x, y)
    assert torch.equal(a(*inputs)[0], a(*inputs)[0])


def test_zero_m1_equals_scaled_addition_path():
    mod = Generator(small_cfg(sites=("m1",), seed=1))
    zero_(mod.fusion)
    add = Generator(small_cfg(fusion_mode="addition", sites=(), seed=2))
    add.load_state_dict({k: v for k, v in mod.state_dict().items() if not k.startswith("fusion.")})
    rgb, tsdf, p2v = small_inputs(4)
    v_r, v_t, _ = mod.features(rgb, tsdf, p2v)
    out_mod, _ = mod(rgb, tsdf, p2v)
    # addition with V_t forced to zero, V_r scaled by 1.5 at the fusion point
    assert torch.equal(out_mod, add.decode(add.fuse(1.5 * v_r, torch.zeros_like(v_t))))


def test_generator_gradcheck_below_tolerance():
    report = run_gradcheck(seed=1, cases=3)
    for k, v in report.items():
        if k not in ("cases", "seed"):
            assert v < 1e-4, k


def test_decode_parameter_slice_finite_differences():
    net = tiny_generator(3)
    g = torch.Generator().manual_seed(3)
    rgb = torch.rand(1, 3, 16, 16, generator=g, dtype=DT)
    tsdf = torch.rand(1, 4, 4, 4, generator=g, dtype=DT)
    p2v = torch.randint(-1, 64, (1, 16, 16), generator=g)
    w = net.decoder.mid.conv_y.weight
    idx = list(range(10))
    net.zero_grad()
    net(rgb, tsdf, p2v)[0].sum().backward()
    auto = w.grad.reshape(-1)[idx].clone()
    with torch.no_grad():
        num = central_diff(lambda: net(rgb, tsdf, p2v)[0].sum(), w, idx)
    assert rel_err(auto, num) < 1e-4


def test_single_modality_generators():
    rgb, tsdf, p2v = small_inputs()
    for mods in (("rgb",), ("tsdf",)):
        net = Generator(small_cfg(fusion_mode="addition", sites=(), modalities=mods))
        out, l2 = net(rgb, tsdf, p2v)
        assert out.shape == (1, 4, 8, 8, 8)
        assert (l2 is None) == (mods == ("tsdf",))
