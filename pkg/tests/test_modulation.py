import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from torch.autograd import gradcheck

from viewage.modulation import AgeModulator, apply_aging
from viewage.world import EmbeddingVector, LatentCode


def small(**kw):
    torch.manual_seed(0)
    kw = {"num_layers": 4, "style_dim": 8, "embed_dim": 5, **kw}
    return AgeModulator(**kw).double()


def randomize(mod, scale=0.3, seed=1):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in mod.parameters():
            p.copy_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return mod


def test_fresh_modulator_is_identity_edit():
    mod = AgeModulator()
    w = torch.randn(3, 14, 512)
    e = torch.randn(3, 64)
    out = mod(w, e)
    assert torch.equal(out.residual, torch.zeros_like(w))
    assert torch.equal(out.aged, w)
    assert torch.equal(mod.project(w), w)


def test_default_output_shape():
    out = AgeModulator()(torch.randn(14, 512), torch.randn(64))
    assert out.aged.shape == (14, 512) and out.residual.shape == (14, 512)


def test_zero_maps_give_zero_residual():
    mod = randomize(small())
    for lin in (mod.f_gamma, mod.f_beta):
        torch.nn.init.zeros_(lin.weight)
        torch.nn.init.zeros_(lin.bias)
    r = mod.compute_residual(torch.randn(4, 8, dtype=torch.float64), torch.randn(5, dtype=torch.float64))
    assert torch.equal(r, torch.zeros_like(r))


def test_constant_row_uses_epsilon_guard():
    mod = randomize(small())
    w_prime = torch.randn(4, 8, dtype=torch.float64)
    w_prime[2] = 3.25
    e = torch.randn(5, dtype=torch.float64)
    r = mod.compute_residual(w_prime, e)
    assert torch.equal(mod.normalize(w_prime)[2], torch.zeros(8, dtype=torch.float64))
    assert torch.allclose(r[2], mod.f_beta(e)[2].expand(8))
    assert torch.isfinite(r).all()


def test_residual_matches_hand_computation_2x3():
    mod = AgeModulator(num_layers=2, style_dim=3, embed_dim=1).double()
    with torch.no_grad():
        mod.f_gamma.weight.zero_()
        mod.f_beta.weight.zero_()
        mod.f_gamma.bias.copy_(torch.tensor([2.0, -1.0]))
        mod.f_beta.bias.copy_(torch.tensor([0.5, 0.25]))
    w_prime = torch.tensor([[1.0, 2.0, 6.0], [-1.0, 0.0, 4.0]], dtype=torch.float64)
    # Row 0: mean 3, population variance (4 + 1 + 9) / 3.
    s0 = (14 / 3) ** 0.5
    # Row 1: mean 1, population variance (4 + 1 + 9) / 3.
    s1 = s0
    expected = torch.tensor(
        [
            [2 * (-2 / s0) + 0.5, 2 * (-1 / s0) + 0.5, 2 * (3 / s0) + 0.5],
            [-1 * (-2 / s1) + 0.25, -1 * (-1 / s1) + 0.25, -1 * (3 / s1) + 0.25],
        ],
        dtype=torch.float64,
    )
    r = mod.compute_residual(w_prime, torch.zeros(1, dtype=torch.float64))
    assert torch.allclose(r, expected, atol=1e-12)


def test_global_norm_axis_uses_whole_matrix():
    mod = small(norm_axis="global")
    w = torch.randn(4, 8, dtype=torch.float64)
    n = mod.normalize(w)
    assert abs(float(n.mean())) < 1e-12
    assert float(n.std(unbiased=False)) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        AgeModulator(norm_axis="column")
    with pytest.raises(ValueError):
        AgeModulator(norm_epsilon=0.0)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.01, 100.0))
def test_normalized_rows_have_zero_mean_unit_std(seed, scale):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(4, 8, generator=g, dtype=torch.float64) * scale
    n = small().normalize(w)
    assert float(n.mean(-1).abs().max()) <= 1e-6
    std = n.std(-1, unbiased=False)
    assert float((std - 1).abs().max()) <= 1e-4


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_aged_is_base_plus_residual_exactly(seed):
    mod = randomize(small(), seed=seed)
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(2, 4, 8, generator=g, dtype=torch.float64)
    out = mod(w, torch.randn(2, 5, generator=g, dtype=torch.float64))
    assert out.aged.shape == w.shape == out.residual.shape
    assert torch.equal(out.aged, out.base + out.residual)
    assert torch.equal(out.base, w)


@pytest.mark.parametrize("shared_rows", [True, False])
def test_gradients_match_finite_differences(shared_rows):
    mod = randomize(small(shared_rows=shared_rows, hidden_dim=6))
    w = torch.randn(2, 4, 8, dtype=torch.float64)
    e = torch.randn(2, 5, dtype=torch.float64, requires_grad=True)
    names, params = zip(*mod.named_parameters())

    def f(*ps):
        out = torch.func.functional_call(mod, dict(zip(names, ps)), (w, e))
        return (out.aged**2 * torch.linspace(0.5, 1.5, 8, dtype=torch.float64)).sum()

    assert gradcheck(f, tuple(p.detach().requires_grad_(True) for p in params), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_project_gradient_matches_finite_differences():
    mod = randomize(small())
    w = torch.randn(4, 8, dtype=torch.float64, requires_grad=True)
    assert gradcheck(lambda x: mod.project(x), (w,), eps=1e-6, atol=1e-8, rtol=1e-3)


def test_unshared_rows_have_per_row_parameters():
    mod = small(shared_rows=False)
    assert mod.w1.shape[0] == 4
    assert small().w1.shape[0] == 1


def test_apply_aging_accepts_domain_types():
    mod = randomize(small().float())
    out = apply_aging(mod, LatentCode(torch.randn(4, 8)), EmbeddingVector(torch.randn(5)))
    assert torch.equal(out.aged, out.base + out.residual)


def test_config_round_trip():
    mod = small(norm_axis="global", shared_rows=False)
    again = AgeModulator(**mod.config())
    assert again.config() == mod.config()
