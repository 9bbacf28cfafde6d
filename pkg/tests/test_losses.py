import warnings

import numpy as np
import pytest

from crossdistill import autodiff as ad
from crossdistill import losses as L
from crossdistill.ctc import ctc_loss
from crossdistill.exceptions import AlignmentError, ConfigError, ContractError, DomainError

from .conftest import log_softmax_np, make_params

LN2 = 0.693147180559945309


def logits_for(probs):
    return np.log(np.asarray(probs, dtype=float))


class TestTemperedSoftmax:
    def test_equal_logits(self):
        q = L.tempered_softmax(np.array([[2.0, 2.0, 2.0]]), 3.0).data
        np.testing.assert_allclose(q, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_unit_temperature(self):
        q = L.tempered_softmax(np.array([[1.0, 0.0]]), 1.0).data
        np.testing.assert_allclose(q, [[0.731058578630004879, 0.268941421369995121]], atol=1e-12)

    def test_high_temperature_flattens(self):
        q5 = L.tempered_softmax(np.array([[1.0, 0.0]]), 5.0).data
        q1 = L.tempered_softmax(np.array([[1.0, 0.0]]), 1.0).data
        np.testing.assert_allclose(q5, [[0.549833997312477909, 0.450166002687522091]], atol=1e-12)
        assert np.ptp(q5) < np.ptp(q1)

    def test_rows_sum_to_one_for_extreme_logits(self, rng):
        z = rng.normal(size=(20, 7)) * 300
        q = L.tempered_softmax(z, 0.7).data
        L.check_distribution(q)

    def test_nonpositive_temperature(self):
        with pytest.raises(ConfigError):
            L.tempered_softmax(np.zeros((1, 2)), 0.0)


class TestCrossEntropyKL:
    def test_perfect_prediction(self):
        assert L.cross_entropy(np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]])).item() == 0.0

    def test_half(self):
        assert L.cross_entropy(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item() == \
            pytest.approx(LN2, abs=1e-12)

    def test_clamp(self):
        v = L.cross_entropy(np.array([[1.0, 0.0]]), np.array([[1e-15, 1 - 1e-15]])).item()
        assert v == pytest.approx(27.6310211159285482, abs=1e-9)

    def test_integer_targets(self):
        q = np.array([[0.5, 0.5], [0.25, 0.75]])
        a = L.cross_entropy(np.array([0, 1]), q).item()
        b = L.cross_entropy(np.array([[1.0, 0.0], [0.0, 1.0]]), q).item()
        assert a == b

    def test_rejects_soft_targets(self):
        with pytest.raises(ContractError, match="one-hot"):
            L.cross_entropy(np.array([[0.5, 0.5]]), np.array([[0.5, 0.5]]))

    def test_kl_identity(self, rng):
        P = L.softmax_np(rng.normal(size=(4, 5)))
        assert L.kl_divergence(P, P).item() == pytest.approx(0.0, abs=1e-15)

    def test_kl_half(self):
        assert L.kl_divergence(np.array([[1.0, 0.0]]), np.array([[0.5, 0.5]])).item() == \
            pytest.approx(LN2, abs=1e-12)

    def test_kl_nonnegative(self, rng):
        for _ in range(200):
            P = L.softmax_np(rng.normal(size=(3, 6)) * 3)
            Q = L.softmax_np(rng.normal(size=(3, 6)) * 3)
            assert L.kl_divergence(P, Q).item() >= 0.0

    def test_kl_shape_mismatch(self):
        with pytest.raises(ContractError):
            L.kl_divergence(np.ones((2, 3)) / 3, np.ones((3, 3)) / 3)

    def test_check_distribution(self):
        with pytest.raises(DomainError):
            L.check_distribution(np.array([[0.6, 0.6]]))


class TestJLF1:
    def test_kl_vanishes_for_identical_logits(self, rng):
        z = rng.normal(size=(5, 4))
        Y = rng.integers(0, 4, size=5)
        for alpha in (0.0, 0.3, 0.7, 1.0):
            out = L.jlf1(z, z, Y, temperature=2.0, alpha=alpha)
            ce = L.cross_entropy(Y, L.tempered_softmax(z, 1.0)).item()
            assert out.total.item() == pytest.approx((1 - alpha) * ce, abs=1e-12)

    def test_alpha_zero_ignores_teacher(self, rng):
        z = rng.normal(size=(5, 4))
        Y = rng.integers(0, 4, size=5)
        ce = L.cross_entropy(Y, L.tempered_softmax(z, 1.0)).item()
        for _ in range(5):
            t = rng.normal(size=(5, 4)) * 4
            assert abs(L.jlf1(t, z, Y, 3.0, 0.0).total.item() - ce) <= 1e-12

    def test_composed_value(self):
        # teacher P = [1, 0] (huge logit gap), student Q = [0.5, 0.5], Y = [1, 0]
        t = np.array([[50.0, -50.0]])
        s = np.array([[0.0, 0.0]])
        out = L.jlf1(t, s, np.array([0]), temperature=1.0, alpha=0.5)
        assert out.total.item() == pytest.approx(LN2, abs=1e-12)

    def test_bounded_over_temperature(self, rng):
        t = rng.normal(size=(6, 5)) * 2
        s = rng.normal(size=(6, 5)) * 2
        Y = rng.integers(0, 5, size=6)
        totals = [L.jlf1(t, s, Y, T, 0.5).total.item() for T in (1, 2, 5, 10, 20)]
        kl_scaled = [L.jlf1(t, s, Y, T, 1.0).total.item() for T in (1, 2, 5, 10, 20)]
        assert max(totals) < 10 * max(totals[0], 1.0)
        # T^2 * KL_T approaches a finite limit
        assert abs(kl_scaled[-1] - kl_scaled[-2]) < 0.05 * kl_scaled[-2] + 1e-9

    def test_alignment_error(self):
        with pytest.raises(AlignmentError):
            L.jlf1(np.zeros((3, 4)), np.zeros((4, 4)), np.zeros(4, dtype=int))

    def test_bad_alpha(self):
        with pytest.raises(ConfigError):
            L.jlf1(np.zeros((1, 2)), np.zeros((1, 2)), np.array([0]), alpha=1.5)


class TestMTL:
    def test_unit_sigmas(self):
        out = L.mtl_loss(ad.Tensor(0.3), ad.Tensor(0.9), ad.Tensor(0.0), ad.Tensor(0.0))
        assert out.item() == pytest.approx(1.2, abs=1e-15)
        assert out.shape == ()

    @pytest.mark.parametrize("k", [0.045, 0.068, 0.5, 2.0])
    def test_stationary_sigma(self, k):
        # d/drho [k exp(-2 rho) + rho] = 0  <=>  sigma^2 = 2k
        rho = 0.5 * np.log(2 * k)
        p = make_params(r=np.array([rho]))
        g = ad.backward(L.mtl_loss(ad.Tensor(k), ad.Tensor(1.0), p["r"], ad.Tensor(0.0)), p)
        assert abs(g["r"][0]) < 1e-12

    def test_sigma_for_small_kl(self):
        assert np.sqrt(2 * 0.068) == pytest.approx(0.37, abs=0.005)

    def test_gradients_reach_losses_and_scales(self, rng):
        p = make_params(z=rng.normal(size=(4, 3)), r1=np.array([0.2]), r2=np.array([-0.3]))
        t = rng.normal(size=(4, 3))
        Y = rng.integers(0, 3, size=4)

        def f(ps):
            kl, ce = L.frame_terms(t, ps["z"], Y)
            return L.mtl_loss(kl, ce, ps["r1"], ps["r2"])

        assert ad.grad_check(f, p) <= 1e-4


class TestBalanceCoefficient:
    @pytest.mark.parametrize("s1,s2,exact,rounded", [
        (0.37, 1.20, 10.52, 10),
        (0.59, 1.02, 2.99, 3),
        (0.23, 0.74, 10.35, 10),
    ])
    def test_known_pairs(self, s1, s2, exact, rounded):
        from crossdistill.estimators import round_balance
        a = L.balance_coefficient(s1, s2)
        assert round(a, 2) == exact
        assert round_balance(a) == rounded

    def test_symmetric(self):
        for s in (0.1, 1.0, 3.7):
            assert L.balance_coefficient(s, s) == 1.0

    def test_zero_sigma(self):
        with pytest.raises(DomainError):
            L.balance_coefficient(0.0, 1.0)


class TestJLF3:
    def test_unit_coefficient(self, rng):
        for _ in range(20):
            t, s = rng.normal(size=(2, 5, 4))
            Y = rng.integers(0, 4, size=5)
            out = L.jlf3(t, s, Y, 1.0)
            kl = L.kl_divergence(L.softmax_np(t), L.tempered_softmax(s)).item()
            ce = L.cross_entropy(Y, L.tempered_softmax(s)).item()
            assert abs(out.total.item() - 0.5 * (kl + ce)) <= 1e-12

    def test_identical_logits(self, rng):
        z = rng.normal(size=(3, 4))
        Y = rng.integers(0, 4, size=3)
        out = L.jlf3(z, z, Y, 7.0)
        assert out.total.item() == pytest.approx(0.5 * out.ce.item(), abs=1e-12)

    def test_composed_value(self):
        out = L.jlf3(np.array([[50.0, -50.0]]), np.zeros((1, 2)), np.array([0]), 10.0)
        assert out.total.item() == pytest.approx(3.81230949307969920, abs=1e-10)

    def test_breakdown_total_consistent(self, rng):
        t, s = rng.normal(size=(2, 6, 5))
        Y = rng.integers(0, 5, size=6)
        out = L.jlf3(t, s, Y, 3.3)
        assert abs(out.total.item() - 0.5 * (3.3 * out.kl.item() + out.ce.item())) <= 1e-12


class TestSequenceLosses:
    def test_identical_logits(self, rng):
        z = rng.normal(size=(6, 4))
        out = L.sequence_kd_loss(z, z, [1, 2])
        ctc = ctc_loss(log_softmax_np(z), [1, 2]).item()
        assert out.cos_term.item() == pytest.approx(1.0, abs=1e-12)
        assert out.total.item() == pytest.approx(0.5 * ctc, abs=1e-12)

    def test_orthogonal_rows(self):
        s = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 1.0]])
        t = np.array([[0.0, 3.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
        out = L.sequence_kd_loss(s, t, [1])
        assert out.total.item() == pytest.approx(0.5 * (1 + out.ctc.item()), abs=1e-12)

    def test_antipodal(self, rng):
        z = rng.normal(size=(5, 3))
        out = L.sequence_kd_loss(z, -z, [2])
        assert out.cos_term.item() == pytest.approx(-1.0, abs=1e-12)
        assert out.total.item() == pytest.approx(1 + 0.5 * out.ctc.item(), abs=1e-12)

    def test_zero_norm_row_is_orthogonal(self, rng):
        s = rng.normal(size=(3, 4))
        t = s.copy()
        t[1] = 0.0
        with pytest.warns(RuntimeWarning, match="zero-norm"):
            out = L.sequence_kd_loss(s, t, [1])
        assert out.cos_term.item() == pytest.approx(2 / 3, abs=1e-12)
        p = make_params(s=s)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            err = ad.grad_check(lambda ps: L.sequence_kd_loss(ps["s"], t, [1]).total, p)
        assert err <= 1e-4

    def test_empty_transcript(self):
        with pytest.raises(ContractError):
            L.sequence_kd_loss(np.ones((2, 3)), np.ones((2, 3)), [])

    def test_kl_ctc_identical(self, rng):
        z = rng.normal(size=(5, 4))
        out = L.kl_ctc_loss(z, z, [3, 1])
        assert out.total.item() == pytest.approx(0.5 * out.ctc.item(), abs=1e-12)

    def test_kl_ctc_term(self):
        t = np.array([[50.0, -50.0], [50.0, -50.0]])
        out = L.kl_ctc_loss(np.zeros((2, 2)), t, [1])
        assert out.kl.item() == pytest.approx(LN2, abs=1e-12)

    def test_kl_ctc_at_least_half_ctc(self, rng):
        for _ in range(50):
            s, t = rng.normal(size=(2, 5, 4)) * 2
            out = L.kl_ctc_loss(s, t, [1, 2])
            assert out.total.item() >= 0.5 * out.ctc.item() - 1e-15


# every loss: analytic gradient w.r.t. student logits versus central differences
def _loss_cases():
    def ce(t, z, Y, y):
        return L.cross_entropy(Y, L.tempered_softmax(z))

    def kl(t, z, Y, y):
        return L.kl_divergence(L.softmax_np(t), L.tempered_softmax(z))

    def mtl(t, z, Y, y):
        k, c = L.frame_terms(t, z, Y)
        return L.mtl_loss(k, c, ad.Tensor(0.3), ad.Tensor(-0.2))

    return {
        "cross_entropy": ce,
        "kl_divergence": kl,
        "jlf1": lambda t, z, Y, y: L.jlf1(t, z, Y, 2.5, 0.4).total,
        "mtl": mtl,
        "jlf3": lambda t, z, Y, y: L.jlf3(t, z, Y, 4.0).total,
        "sequence_kd": lambda t, z, Y, y: L.sequence_kd_loss(z, t, y).total,
        "kl_ctc": lambda t, z, Y, y: L.kl_ctc_loss(z, t, y).total,
        "ctc": lambda t, z, Y, y: ctc_loss(L.log_softmax(z), y),
    }


LOSS_CASES = _loss_cases()


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients_match_finite_differences(name):
    f = LOSS_CASES[name]
    r = np.random.default_rng(sorted(LOSS_CASES).index(name))
    worst = 0.0
    for _ in range(50):
        F, C = int(r.integers(3, 6)), int(r.integers(3, 5))
        t = r.normal(size=(F, C)) * 2
        Y = r.integers(0, C, size=F)
        y = list(r.integers(1, C, size=int(r.integers(1, 3))))
        p = make_params(z=r.normal(size=(F, C)) * 2)
        worst = max(worst, ad.grad_check(lambda ps: f(t, ps["z"], Y, y), p))
    assert worst <= 1e-4


@pytest.mark.parametrize("name", ["jlf1", "jlf3", "sequence_kd", "kl_ctc", "mtl"])
def test_teacher_receives_no_gradient(name, rng):
    f = LOSS_CASES[name]
    t = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    z = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    ad.backward(f(t, z, rng.integers(0, 3, size=4), [1, 2]))
    assert t.grad is None or np.all(t.grad == 0.0)
    assert z.grad is not None and np.any(z.grad != 0.0)


def test_distill_config_validation():
    with pytest.raises(ConfigError):
        L.DistillConfig(strategy="nope")
    with pytest.raises(ConfigError):
        L.DistillConfig(temperature=-1)
    with pytest.raises(ConfigError):
        L.DistillConfig(alpha=2)
    with pytest.raises(ConfigError):
        L.DistillConfig(balance_coef=0)
    cfg = L.DistillConfig(strategy="seq-COSCTC")
    assert cfg.is_distillation and cfg.is_sequence_level
