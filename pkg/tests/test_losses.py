import math

import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from ammnet.discriminator import DiscScore
from ammnet.losses import adv_losses, smooth_ce, ssc_loss
from ammnet.voxel_data import IGNORE


def scalar_smooth_ce(logits, target, eps):
    """Per-cell loop: -(1-eps) log p_y - eps/(K-1) sum_{c != y} log p_c."""
    b, k = logits.shape[:2]
    flat = logits.movedim(1, -1).reshape(-1, k).tolist()
    tgt = target.reshape(-1).tolist()
    total, n = 0.0, 0
    for row, y in zip(flat, tgt):
        if y == IGNORE:
            continue
        m = max(row)
        lse = m + math.log(sum(math.exp(v - m) for v in row))
        logp = [v - lse for v in row]
        loss = -(1 - eps) * logp[y] - eps / (k - 1) * sum(logp[c] for c in range(k) if c != y)
        total += loss
        n += 1
    return total / n


def scalar_adv(real, gen, geo, sem, literal=False):
    def clamp(p):
        return min(max(p, 1e-7), 1 - 1e-7)

    def mean(xs):
        return sum(xs) / len(xs)

    ld = -(mean([math.log(clamp(p)) for p in real]) + mean([math.log(1 - clamp(p)) for p in gen])
           + mean([math.log(1 - clamp(p)) for p in geo]) + mean([math.log(1 - clamp(p)) for p in sem]))
    if literal:
        lg = mean([math.log(1 - clamp(p)) for p in gen])
    else:
        lg = -mean([math.log(clamp(p)) for p in gen])
    return ld, lg


def score(p):
    return DiscScore.from_prob(torch.tensor(p, dtype=torch.float64))


# -- smoothed cross entropy -------------------------------------------------------

def test_eps_zero_is_standard_cross_entropy():
    g = torch.Generator().manual_seed(0)
    logits = torch.randn(2, 5, 4, 3, 3, generator=g)
    target = torch.randint(0, 5, (2, 4, 3, 3), generator=g)
    assert abs(smooth_ce(logits, target, 0.0).item() - F.cross_entropy(logits, target).item()) < 1e-6


@pytest.mark.parametrize("eps", [0.0, 0.1, 0.5])
def test_uniform_logits_give_log_k(eps):
    logits = torch.zeros(1, 12, 3, 3, 3, dtype=torch.float64)
    target = torch.randint(0, 12, (1, 3, 3, 3))
    assert abs(smooth_ce(logits, target, eps).item() - math.log(12)) < 1e-6
    assert abs(math.log(12) - 2.4849066497880004) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), eps=st.floats(0, 0.9), k=st.integers(2, 6))
def test_smooth_ce_matches_scalar_oracle(seed, eps, k):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(2, k, 2, 3, generator=g, dtype=torch.float64) * 3
    target = torch.randint(0, k, (2, 2, 3), generator=g)
    target[0, 0, 0] = IGNORE
    assert smooth_ce(logits, target, eps).item() == pytest.approx(scalar_smooth_ce(logits, target, eps), abs=1e-9)


def test_ignore_and_mask():
    logits = torch.randn(1, 3, 2, 2, 2)
    target = torch.full((1, 2, 2, 2), IGNORE)
    with pytest.raises(ValueError):
        smooth_ce(logits, target)
    target[0, 0, 0, 0] = 1
    mask = torch.zeros(1, 2, 2, 2, dtype=torch.bool)
    with pytest.raises(ValueError):
        smooth_ce(logits, target, mask=mask)
    with pytest.raises(ValueError):
        smooth_ce(logits, target, eps=1.0)


def test_ssc_loss_lambda_weighting_is_exact():
    g = torch.Generator().manual_seed(1)
    l3 = torch.randn(2, 4, 4, 4, 4, generator=g, dtype=torch.float64)
    y3 = torch.randint(0, 4, (2, 4, 4, 4), generator=g)
    l2 = torch.randn(2, 4, 4, 4, generator=g, dtype=torch.float64)
    y2 = torch.randint(0, 4, (2, 16, 16), generator=g)
    a = smooth_ce(l3, y3, 0.1)
    b = smooth_ce(F.interpolate(l2, size=(16, 16), mode="nearest"), y2, 0.1)
    assert ssc_loss(l3, y3, l2, y2, 0.25, 0.1).item() == (a + 0.25 * b).item()
    assert ssc_loss(l3, y3, l2, y2, 0.0, 0.1).item() == a.item()
    # identical per-cell losses t in both terms give (1 + lambda) * t
    u3 = torch.zeros(1, 4, 2, 2, 2, dtype=torch.float64)
    u2 = torch.zeros(1, 4, 1, 1, dtype=torch.float64)
    t = math.log(4)
    total = ssc_loss(u3, torch.zeros(1, 2, 2, 2, dtype=torch.long), u2, torch.zeros(1, 4, 4, dtype=torch.long), 0.25, 0.1)
    assert total.item() == pytest.approx(1.25 * t, abs=1e-12)


# -- adversarial losses ------------------------------------------------------------

def test_half_scores():
    half = score([0.5, 0.5])
    ld, lg = adv_losses(half, half, half, half)
    assert abs(ld.item() - 4 * math.log(2)) < 1e-9
    assert abs(lg.item() - math.log(2)) < 1e-9
    _, lg_lit = adv_losses(half, half, literal=True)
    assert abs(lg_lit.item() + math.log(2)) < 1e-9


def test_random_scores_match_scalar_oracle():
    g = torch.Generator().manual_seed(2)
    for _ in range(50):
        ps = [torch.rand(4, generator=g, dtype=torch.float64).tolist() for _ in range(4)]
        ld, lg = adv_losses(*(score(p) for p in ps))
        eld, elg = scalar_adv(*ps)
        assert abs(ld.item() - eld) < 1e-9 and abs(lg.item() - elg) < 1e-9
        _, lg_lit = adv_losses(*(score(p) for p in ps), literal=True)
        assert abs(lg_lit.item() - scalar_adv(*ps, literal=True)[1]) < 1e-9


def test_saturated_scores_are_clamped():
    sure = DiscScore.from_logit(torch.tensor([80.0, -80.0], dtype=torch.float64))
    ld, lg = adv_losses(sure, sure)
    assert math.isfinite(ld.item()) and math.isfinite(lg.item())
    bound = -math.log(1e-7)
    assert ld.item() <= 2 * bound + 1e-6 and lg.item() <= bound + 1e-6


def test_missing_fake_kinds_are_dropped():
    half = score([0.5])
    ld, _ = adv_losses(half, half)
    assert abs(ld.item() - 2 * math.log(2)) < 1e-9
    ld3, _ = adv_losses(half, half, d_geo=half)
    assert abs(ld3.item() - 3 * math.log(2)) < 1e-9


def test_generator_term_only_flows_through_generated_score():
    logits = torch.zeros(4, 4, dtype=torch.float64, requires_grad=True)
    real, gen, geo, sem = (DiscScore.from_logit(logits[i]) for i in range(4))
    _, lg = adv_losses(real, gen, geo, sem)
    (grad,) = torch.autograd.grad(lg, logits)
    assert torch.count_nonzero(grad[[0, 2, 3]]) == 0
    assert torch.count_nonzero(grad[1]) == 4
