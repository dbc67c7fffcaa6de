import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from nicegan.config import default_paper_config
from nicegan.losses import (LossBundle, NonFiniteLossError, ScaleMismatchError,
                            compose_objectives, l1_loss, lsgan_d, lsgan_g)


def t(v):
    return torch.tensor(v, dtype=torch.float64)


def test_lsgan_d_hand_values():
    assert float(lsgan_d({"c1": t([1.0, 1.0])}, {"c1": t([0.0, 0.0])})) == 0.0
    assert float(lsgan_d({"c0": t(0.0)}, {"c0": t(1.0)})) == pytest.approx(2.0, abs=1e-8)
    assert float(lsgan_d({"c0": t(0.5)}, {"c0": t(0.5)})) == pytest.approx(0.5, abs=1e-8)


def test_lsgan_d_scale_mismatch():
    with pytest.raises(ScaleMismatchError):
        lsgan_d({"c0": t(0.0)}, {"c1": t(0.0)})


def test_lsgan_g_hand_values():
    assert float(lsgan_g({"c0": t([1.0])})) == 0.0
    assert float(lsgan_g({"c0": t([0.0])})) == pytest.approx(1.0, abs=1e-8)
    three = {k: t(np.zeros((2, 1, 3, 3))) for k in ("c0", "c1", "c2")}
    assert float(lsgan_g(three)) == pytest.approx(3.0, abs=1e-8)


def test_l1_hand_values():
    a = t([1.0, -1.0])
    b = t([0.0, 0.0])
    assert float(l1_loss(a, a)) == 0.0
    assert float(l1_loss(a, b)) == pytest.approx(1.0, abs=1e-8)
    with pytest.raises(ValueError):
        l1_loss(a, t([0.0]))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.floats(0.01, 10))
def test_l1_positive_homogeneity(vals, c):
    a = t(vals)
    b = t(vals[::-1])
    assert float(l1_loss(c * a, c * b)) == pytest.approx(c * float(l1_loss(a, b)), rel=1e-9, abs=1e-12)


def test_compose_default_weights():
    parts = LossBundle(**{k: 1.0 for k in ("d_adv_x", "d_adv_y", "g_adv_x", "g_adv_y",
                                            "cycle_x", "cycle_y", "recon_x", "recon_y")})
    total_d, total_g = compose_objectives(parts, default_paper_config())
    assert total_d == pytest.approx(2.0, abs=1e-8)
    assert total_g == pytest.approx(42.0, abs=1e-8)
    assert compose_objectives(LossBundle(), default_paper_config()) == (0.0, 0.0)


def test_compose_degenerate_weights():
    cfg = default_paper_config().replace(lambda_cycle=0.0, lambda_recon=0.0)
    parts = dict(g_adv_x=0.25, g_adv_y=0.5, cycle_x=3.0, cycle_y=3.0, recon_x=9.0, recon_y=1.0)
    assert compose_objectives(parts, cfg)[1] == pytest.approx(0.75)


def test_compose_nan_names_part():
    with pytest.raises(NonFiniteLossError) as exc:
        compose_objectives({"cycle_y": float("nan"), "g_adv_x": 1.0}, default_paper_config(), iteration=7)
    assert exc.value.name == "cycle_y" and exc.value.iteration == 7


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.lists(st.floats(-3, 3), min_size=4, max_size=4))
def test_nonnegative_and_zero_iff_targets(real, fake):
    d = float(lsgan_d({"c1": t(real)}, {"c1": t(fake)}))
    assert d >= 0
    if d == 0:
        assert real == [1.0] * 4 and all(f == 0 for f in fake)


def test_direction_symmetry():
    cfg = default_paper_config()
    a = dict(d_adv_x=0.3, d_adv_y=0.7, g_adv_x=0.1, g_adv_y=0.2, cycle_x=0.5, cycle_y=0.4,
             recon_x=0.9, recon_y=0.8)
    swapped = {k[:-1] + ("y" if k.endswith("x") else "x"): v for k, v in a.items()}
    assert compose_objectives(a, cfg) == pytest.approx(compose_objectives(swapped, cfg))


def central_difference(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def autograd(f_torch, x):
    xt = torch.tensor(x, dtype=torch.float64, requires_grad=True)
    f_torch(xt).backward()
    return xt.grad.numpy()


@pytest.mark.parametrize("which", ["lsgan_d_real", "lsgan_d_fake", "lsgan_g", "l1"])
def test_gradients_match_finite_differences(which):
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 1, 3, 3))
    other = rng.normal(size=(2, 1, 3, 3))
    fns = {
        "lsgan_d_real": (lambda v: lsgan_d({"c1": v}, {"c1": torch.tensor(other)}),
                         lambda v: np.mean((v - 1) ** 2) + np.mean(other ** 2)),
        "lsgan_d_fake": (lambda v: lsgan_d({"c1": torch.tensor(other)}, {"c1": v}),
                         lambda v: np.mean((other - 1) ** 2) + np.mean(v ** 2)),
        "lsgan_g": (lambda v: lsgan_g({"c1": v}), lambda v: np.mean((v - 1) ** 2)),
        "l1": (lambda v: l1_loss(v, torch.tensor(other)), lambda v: np.mean(np.abs(v - other))),
    }
    f_torch, f_np = fns[which]
    analytic = autograd(f_torch, x)
    numeric = central_difference(f_np, x)
    np.testing.assert_allclose(analytic, numeric, rtol=1e-4, atol=1e-9)
