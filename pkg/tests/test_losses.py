import json
import math
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from asymdistill.exceptions import DegenerateInputError, ValidationError
from asymdistill.losses import (
    SimclrParams,
    VicregParams,
    covariance_term,
    invariance_term,
    ln_uniform_nt_xent,
    nt_xent,
    variance_term,
    vicreg_loss,
)
from oracles import nt_xent_ref, vicreg_ref

FROZEN = json.loads((Path(__file__).parent / "fixtures" / "frozen.json").read_text())


def _pair(seed, n=8, d=5, dtype=torch.float64):
    g = np.random.default_rng(seed)
    return torch.tensor(g.normal(size=(n, d)), dtype=dtype), torch.tensor(g.normal(size=(n, d)), dtype=dtype)


@pytest.mark.parametrize("seed", range(20))
def test_vicreg_matches_loop_oracle(seed):
    za, zb = _pair(seed)
    got = float(vicreg_loss(za, zb).total)
    assert got == pytest.approx(vicreg_ref(za.tolist(), zb.tolist()), rel=1e-6)
    got_mean = float(vicreg_loss(za, zb, VicregParams(invariance_reduction="mean")).total)
    assert got_mean == pytest.approx(vicreg_ref(za.tolist(), zb.tolist(), reduction="mean"), rel=1e-6)


@pytest.mark.parametrize("seed", range(20))
def test_nt_xent_matches_loop_oracle(seed):
    za, zb = _pair(seed)
    assert float(nt_xent(za, zb).total) == pytest.approx(nt_xent_ref(za.tolist(), zb.tolist()), rel=1e-6)


def test_frozen_oracle_values():
    for case in FROZEN["vicreg"]:
        za, zb = _pair(case["seed"])
        assert float(vicreg_loss(za, zb).total) == pytest.approx(case["value"], rel=1e-9)
    for case in FROZEN["nt_xent"]:
        za, zb = _pair(case["seed"])
        assert float(nt_xent(za, zb).total) == pytest.approx(case["value"], rel=1e-9)


def test_components_weighted_sum_equals_total():
    za, zb = _pair(3)
    br = vicreg_loss(za, zb)
    assert br.weighted_sum() == pytest.approx(float(br.total), rel=1e-12)
    assert set(br.components) == {"invariance", "variance_a", "variance_b", "covariance_a", "covariance_b"}


def test_identical_embeddings_nt_xent_is_log_2n_minus_1():
    for n in (2, 5, 17):
        z = torch.ones(n, 4, dtype=torch.float64)
        assert float(nt_xent(z, z.clone()).total) == pytest.approx(math.log(2 * n - 1), abs=1e-12)
        assert ln_uniform_nt_xent(n) == pytest.approx(math.log(2 * n - 1))


def test_constant_input_variance_term():
    z = torch.full((8, 5), 0.3, dtype=torch.float64)
    assert float(variance_term(z)) == pytest.approx(1.0 - math.sqrt(1e-4), abs=1e-12)
    assert float(variance_term(z)) == pytest.approx(0.99, abs=1e-12)


def test_identical_inputs_zero_invariance():
    za, _ = _pair(0)
    assert float(invariance_term(za, za.clone())) == 0.0


def test_covariance_zero_for_decorrelated_columns():
    # Left singular vectors of a centred matrix are centred and orthogonal.
    h = torch.eye(16, dtype=torch.float64) - 1.0 / 16
    z = h @ torch.randn(16, 4, dtype=torch.float64)
    u, _, _ = torch.linalg.svd(z, full_matrices=False)
    assert float(covariance_term(u)) == pytest.approx(0.0, abs=1e-20)


def _fd_check(fn, za, zb, step=1e-5, tol=1e-4):
    za = za.clone().requires_grad_(True)
    zb = zb.clone().requires_grad_(True)
    fn(za, zb).total.backward()
    for t, g in ((za, za.grad), (zb, zb.grad)):
        for idx in np.ndindex(*t.shape):
            with torch.no_grad():
                orig = float(t[idx])
                t[idx] = orig + step
                up = float(fn(za, zb).total)
                t[idx] = orig - step
                down = float(fn(za, zb).total)
                t[idx] = orig
            fd = (up - down) / (2 * step)
            an = float(g[idx])
            assert abs(an - fd) <= tol * max(1.0, abs(fd)), (idx, an, fd)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(seed):
    za, zb = _pair(100 + seed, n=6, d=4)
    _fd_check(vicreg_loss, za, zb)
    _fd_check(nt_xent, za, zb)


def test_shape_and_degenerate_errors():
    za, zb = _pair(0)
    with pytest.raises(ValidationError):
        vicreg_loss(za, zb[:, :3])
    with pytest.raises(ValidationError):
        variance_term(za[:1])
    with pytest.raises(DegenerateInputError):
        nt_xent(torch.zeros(4, 3), torch.ones(4, 3))
    with pytest.raises(ValueError):
        VicregParams(eps=0.0)
    with pytest.raises(ValueError):
        SimclrParams(temperature=0.0)


finite = st.floats(-10, 10, allow_nan=False, width=64)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 4), elements=finite), arrays(np.float64, (6, 4), elements=finite))
def test_vicreg_nonnegative_and_symmetric(a, b):
    za, zb = torch.tensor(a), torch.tensor(b)
    ab, ba = float(vicreg_loss(za, zb).total), float(vicreg_loss(zb, za).total)
    assert ab >= 0.0
    assert ab == pytest.approx(ba, rel=1e-12, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(0.1, 5, width=64)), st.floats(0.1, 10))
def test_nt_xent_scale_invariant_and_swap_symmetric(a, scale):
    za = torch.tensor(a)
    zb = torch.flip(za, dims=[0]) + 0.5
    base = float(nt_xent(za, zb).total)
    assert float(nt_xent(za * scale, zb).total) == pytest.approx(base, rel=1e-9)
    assert float(nt_xent(zb, za).total) == pytest.approx(base, rel=1e-9)
    assert base >= 0.0


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (6, 4), elements=finite), st.floats(0.25, 2.0))
def test_variance_term_bounds(a, gamma):
    v = float(variance_term(torch.tensor(a), gamma=gamma))
    assert 0.0 <= v <= gamma


def test_invariance_hand_cases():
    za = torch.tensor([[0.0, 0.0], [1.0, 2.0]], dtype=torch.float64)
    zb = za + torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert float(invariance_term(za, zb)) == pytest.approx(1.0, abs=1e-15)
    a, b = _pair(4)
    assert float(invariance_term(3 * a, 3 * b)) == pytest.approx(9 * float(invariance_term(a, b)), rel=1e-12)


def test_variance_saturated_hinge_is_zero():
    z = torch.tensor(np.random.default_rng(0).normal(scale=5.0, size=(64, 4)))
    assert float(z.std(0).min()) >= 1.0
    assert float(variance_term(z)) == 0.0


def test_covariance_hand_case_and_row_permutation():
    z = torch.tensor([[1.0, 1.0], [-1.0, -1.0]], dtype=torch.float64)
    assert float(covariance_term(z)) == pytest.approx(4.0, abs=1e-15)
    a, _ = _pair(5)
    perm = torch.randperm(8, generator=torch.Generator().manual_seed(0))
    assert float(covariance_term(a[perm])) == pytest.approx(float(covariance_term(a)), rel=1e-12)


def test_vicreg_all_terms_vanish():
    # Centred, orthogonal columns with std 2 >= gamma, and identical views.
    h = torch.eye(16, dtype=torch.float64) - 1.0 / 16
    u, _, _ = torch.linalg.svd(h @ torch.randn(16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1)), full_matrices=False)
    z = u * 2.0 * (15 ** 0.5)
    assert float(vicreg_loss(z, z.clone()).total) == pytest.approx(0.0, abs=1e-18)


def test_vicreg_linear_in_invariance_weight():
    za, zb = _pair(6)
    base = vicreg_loss(za, zb)
    doubled = vicreg_loss(za, zb, VicregParams(invariance=50.0))
    assert float(doubled.total) - float(base.total) == pytest.approx(25.0 * base.components["invariance"], rel=1e-12)


def test_nt_xent_two_pairs_closed_form():
    z = torch.full((2, 3), 0.7, dtype=torch.float64)
    assert float(nt_xent(z, z.clone()).total) == pytest.approx(math.log(3), abs=1e-12)
    za, zb = _pair(8, n=2, d=3)
    assert float(nt_xent(za, zb).total) == pytest.approx(nt_xent_ref(za.tolist(), zb.tolist()), rel=1e-12)
