"""Finite-difference and closed-form gradient checks in double precision."""
from __future__ import annotations

import torch

from .discriminator import DiscConfig, Discriminator
from .generator import Generator, GeneratorConfig
from .layers import modulate, modulation_grad_identity


def rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    """||a - b|| / max(||a||, ||b||), 0 when both vanish."""
    a, b = a.detach().double().reshape(-1), b.detach().double().reshape(-1)
    den = max(float(a.norm()), float(b.norm()))
    return 0.0 if den == 0 else float((a - b).norm()) / den


def central_diff(f, x: torch.Tensor, indices, h=1e-6) -> torch.Tensor:
    """Central differences of scalar ``f()`` w.r.t. flat entries of ``x`` (in place, restored)."""
    flat = x.data.view(-1)
    out = []
    for i in indices:
        orig = flat[i].item()
        flat[i] = orig + h
        fp = float(f())
        flat[i] = orig - h
        fm = float(f())
        flat[i] = orig
        out.append((fp - fm) / (2 * h))
    return torch.tensor(out, dtype=torch.float64)


def _param_slice_check(module, loss_fn, gen, n=10):
    """Autograd vs central differences on ``n`` random entries of one
    randomly chosen parameter tensor."""
    params = [p for p in module.parameters() if p.requires_grad]
    p = params[int(torch.randint(len(params), (1,), generator=gen))]
    idx = torch.randperm(p.numel(), generator=gen)[:n].tolist()
    module.zero_grad()
    loss_fn().backward()
    auto = p.grad.reshape(-1)[idx].clone()
    with torch.no_grad():
        num = central_diff(loss_fn, p, idx)
    return rel_err(auto, num)


def _weights(shape, gen):
    return torch.randn(shape, generator=gen, dtype=torch.float64)


def check_modulation(gen: torch.Generator):
    v_r = torch.randn(2, 3, 3, 3, 3, generator=gen, dtype=torch.float64, requires_grad=True)
    m_s = torch.randn(2, 3, 3, 3, 3, generator=gen, dtype=torch.float64) * 3
    m_b = torch.randn(2, 3, 3, 3, 3, generator=gen, dtype=torch.float64)
    g = torch.randn(2, 3, 3, 3, 3, generator=gen, dtype=torch.float64)
    (grad,) = torch.autograd.grad(modulate(v_r, m_s, m_b), v_r, g)
    closed = rel_err(grad, modulation_grad_identity(g, m_s))
    idx = torch.randperm(v_r.numel(), generator=gen)[:10].tolist()
    with torch.no_grad():
        num = central_diff(lambda: (modulate(v_r, m_s, m_b) * g).sum(), v_r, idx)
    return closed, rel_err(grad.reshape(-1)[idx], num)


def jitter_biases_(module, seed, scale=0.1):
    """Zero biases put ReLU inputs exactly on the kink wherever the features
    vanish, where central differences see half a slope. Random biases move
    the check point off the kink."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias"):
                p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return module


def tiny_generator(seed, sites=("m1", "m2", "m3")):
    cfg = GeneratorConfig(channels=4, dims=(4, 4, 4), num_classes=3, image_size=(16, 16),
                          rgb_widths=(4, 4, 4, 4), sites=sites, seed=seed)
    return jitter_biases_(Generator(cfg).double(), seed)


def _tiny_inputs(gen: torch.Generator):
    rgb = torch.rand(1, 3, 16, 16, generator=gen, dtype=torch.float64)
    tsdf = torch.rand(1, 4, 4, 4, generator=gen, dtype=torch.float64) * 2 - 1
    pix2vox = torch.randint(-1, 64, (1, 16, 16), generator=gen)
    return rgb, tsdf, pix2vox


def run_gradcheck(seed: int = 0, cases: int = 20) -> dict:
    """Max relative errors over ``cases`` random draws for each check."""
    gen = torch.Generator().manual_seed(int(seed))
    keys = ("modulation_closed_form", "modulation_fd", "rgb_encode_fd", "tsdf_encode_fd",
            "decode_fd", "discriminator_fd")
    errs = {k: [] for k in keys}
    for case in range(cases):
        closed, fd = check_modulation(gen)
        errs["modulation_closed_form"].append(closed)
        errs["modulation_fd"].append(fd)

        net = tiny_generator(seed * 1000 + case)
        rgb, tsdf, pix2vox = _tiny_inputs(gen)
        w2 = _weights((1, 4, 4, 4), gen)
        w3 = _weights((1, 4, 4, 4, 4), gen)

        # input gradient of the RGB encoder
        x = rgb.clone().requires_grad_(True)
        (auto,) = torch.autograd.grad((net.encode_rgb(x)[0] * w2).sum(), x)
        idx = torch.randperm(x.numel(), generator=gen)[:10].tolist()
        with torch.no_grad():
            num = central_diff(lambda: (net.encode_rgb(x)[0] * w2).sum(), x, idx)
        errs["rgb_encode_fd"].append(rel_err(auto.reshape(-1)[idx], num))

        errs["tsdf_encode_fd"].append(_param_slice_check(
            net.tsdf, lambda: (net.encode_tsdf(tsdf) * w3).sum(), gen))
        errs["decode_fd"].append(_param_slice_check(
            net.decoder, lambda: net(rgb, tsdf, pix2vox)[0].sum(), gen))

        disc = Discriminator(DiscConfig(num_classes=3, dims=(4, 4, 4), widths=(4, 4, 4, 4), hidden=8,
                                        seed=seed * 1000 + case)).double()
        jitter_biases_(disc, seed * 1000 + case)
        vol = torch.softmax(torch.randn(2, 4, 4, 4, 4, generator=gen, dtype=torch.float64), dim=1)
        errs["discriminator_fd"].append(_param_slice_check(disc, lambda: disc(vol).sum(), gen))

    report = {k: max(v) for k, v in errs.items()}
    report["cases"] = cases
    report["seed"] = seed
    return report


def report_passes(report: dict, tol: float = 1e-4) -> bool:
    return all(v < tol for k, v in report.items() if k not in ("cases", "seed"))
