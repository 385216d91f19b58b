import numpy as np
import pytest

from sptlab.numeric import SeededRng
from sptlab.theory import (
    ScorePattern, TokenModel, attention_weights, lemma_invariance_check, make_pattern, preset_cases, project,
    row_center, spt_grad_closed_form, verify_proposition,
)

HAND = np.array([[2.0, -1, -1], [-1, 2, -1], [-1, -1, 2]])


def test_hand_case_closed_form():
    assert spt_grad_closed_form(ScorePattern(HAND), np.eye(3)) == pytest.approx(-2 / 3, abs=1e-12)


def test_closed_form_by_brute_force():
    # independent evaluation: -(1/L^2) sum_ij (Delta_ij - rowmean_i) C_ij with explicit loops
    p = make_pattern("random", 5, seed=3)
    C = TokenModel("ar1", 3, 5, sigma2=1.3, rho=0.4).autocorrelation()
    L = 5
    total = 0.0
    for i in range(L):
        mean_i = sum(p.delta[i, k] for k in range(L)) / L
        for j in range(L):
            total += (p.delta[i, j] - mean_i) * C[i, j]
    assert spt_grad_closed_form(p, C) == pytest.approx(-total / L**2, rel=1e-12)


def test_masked_l3_feasible_direction():
    p = make_pattern("random", 3, "diag-masked", seed=1)
    ref = np.array([[0, 1, -1], [-1, 0, 1], [1, -1, 0]], dtype=float)
    np.testing.assert_allclose(p.delta / p.delta[0, 1], ref, atol=1e-10)
    # iid tokens have C proportional to I, so the masked slope vanishes
    assert spt_grad_closed_form(p, np.eye(3)) == 0.0


@pytest.mark.parametrize("variant", ["plain", "diag-masked"])
@pytest.mark.parametrize("L", [3, 4, 8, 16])
def test_projection_satisfies_certificate(variant, L):
    p = make_pattern("random", L, variant, seed=L)
    assert p.valid, p.certificate
    np.testing.assert_allclose(project(p.delta, variant), p.delta, atol=1e-12)


def test_invalid_pattern_rejected():
    with pytest.raises(ValueError, match="certificate"):
        spt_grad_closed_form(ScorePattern(np.eye(3)), np.eye(3))
    with pytest.raises(ValueError):
        spt_grad_closed_form(ScorePattern(HAND, "diag-masked"), np.eye(3))
    with pytest.raises(ValueError):
        ScorePattern(np.ones((2, 3)))


def test_token_model_covariance_matches_samples():
    tm = TokenModel("ar1", 3, 6, sigma2=0.7, rho=0.6)
    X = tm.sample(40_000, SeededRng(0, "cov"))
    emp = np.einsum("nid,njd->ij", X, X) / X.shape[0]
    assert np.abs(emp - tm.autocorrelation()).max() < 0.05


def test_degenerate_token_model_rejected():
    with pytest.raises(ValueError, match="degenerate"):
        TokenModel("iid", 2, 4, sigma2=0.0)
    with pytest.raises(ValueError):
        TokenModel("ar1", 2, 4, rho=1.0)


def test_lemma_invariance_examples():
    rng = SeededRng(2)
    d = rng.normal(25).reshape(5, 5)
    b = rng.normal(25).reshape(5, 5)
    assert lemma_invariance_check(d, b, 0.7) < 1e-12
    assert np.abs(row_center(d).sum(axis=1)).max() < 1e-12


def test_attention_slope_at_zero():
    p = make_pattern("locality", 6, w=1)
    h = 1e-5
    fd = (attention_weights(p.delta, h) - attention_weights(p.delta, -h)) / (2 * h)
    np.testing.assert_allclose(fd, row_center(p.delta) / 6, atol=1e-8)
    m = make_pattern("locality", 6, "diag-masked", w=1)
    A = attention_weights(m.delta, 0.3, "diag-masked")
    assert np.all(np.diag(A) == 0)


def test_verify_report_fields_and_pass():
    p = make_pattern("random", 4, seed=5)
    r = verify_proposition(p, TokenModel("ar1", 3, 4, rho=0.5), n_mc=5_000, seed=1)
    for key in ("closed_form", "fd_sup", "fd_spt", "mc_stderr", "pass_sup", "pass_spt"):
        assert key in r
    assert r["pass"]
    assert abs(r["fd_sup"]) < 1e-6


def test_verify_guards():
    p = make_pattern("random", 4)
    with pytest.raises(ValueError):
        verify_proposition(p, TokenModel("iid", 2, 4), n_mc=10)
    with pytest.raises(ValueError):
        verify_proposition(p, TokenModel("iid", 2, 5))


def test_supervised_slope_nonzero_outside_centered_set():
    # a pattern with nonzero column sums is visible to the pooled probe
    raw = ScorePattern(np.triu(np.ones((4, 4))) - 0.5)
    tm = TokenModel("iid", 3, 4)
    from sptlab.theory import _per_sample_losses

    rng = SeededRng(0, "x")
    X = tm.sample(20_000, rng)
    v = SeededRng(0, "theory", "probe").normal(6)
    u, vv = v[:3], v[3:]
    Y = X[:, 0] @ vv
    h = 1e-4
    sp, _ = _per_sample_losses(attention_weights(raw.delta, h), X, Y, u)
    sm, _ = _per_sample_losses(attention_weights(raw.delta, -h), X, Y, u)
    d = (sp - sm) / (2 * h)
    assert abs(d.mean()) > 5 * d.std() / np.sqrt(d.size)


def test_preset_runs_deterministically():
    cases = preset_cases("prop1-defaults")
    assert len(cases) == 8
    pat, tm = cases[0]
    a = verify_proposition(pat, tm, n_mc=2_000, seed=3)
    b = verify_proposition(pat, tm, n_mc=2_000, seed=3)
    assert a == b
    with pytest.raises(ValueError):
        preset_cases("nope")
