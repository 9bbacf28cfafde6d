import numpy as np
import pytest

from crossdistill import autodiff as ad
from crossdistill.ctc import (
    BLANK,
    collapse,
    ctc_loss,
    ctc_loss_bruteforce,
    extend_labels,
    greedy_decode,
    min_frames,
)
from crossdistill.exceptions import ContractError, InfeasibleAlignmentError, SizeGuardError
from crossdistill.losses import log_softmax

from .conftest import log_softmax_np, make_params


def random_instance(r, max_frames=6, max_labels=3, max_classes=4):
    F = int(r.integers(1, max_frames + 1))
    C = int(r.integers(2, max_classes + 1))
    L = int(r.integers(1, max_labels + 1))
    return log_softmax_np(r.normal(size=(F, C))), r.integers(1, C, size=L)


class TestCtcLoss:
    def test_single_frame(self):
        logp = np.log([[0.1, 0.9]])
        assert ctc_loss(logp, [1]).item() == pytest.approx(0.105360515657826301, abs=1e-12)

    def test_two_uniform_frames(self):
        # alignments aa, a-, -a each carry 0.25
        logp = np.log(np.full((2, 2), 0.5))
        assert ctc_loss(logp, [1]).item() == pytest.approx(0.287682072451780927, abs=1e-12)

    def test_too_few_frames(self):
        logp = np.log([[0.2, 0.4, 0.4]])
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(logp, [1, 2])
        assert ctc_loss(logp, [1, 2], infeasible="inf").item() == np.inf

    def test_repeats_need_a_blank_between(self):
        assert min_frames([1, 1]) == 3
        logp = np.log(np.full((2, 3), 1 / 3))
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss(logp, [1, 1])

    def test_label_validation(self):
        logp = np.log(np.full((3, 3), 1 / 3))
        with pytest.raises(ContractError):
            ctc_loss(logp, [])
        with pytest.raises(ContractError):
            ctc_loss(logp, [0, 1])
        with pytest.raises(ContractError):
            ctc_loss(logp, [3])

    def test_extend_labels(self):
        np.testing.assert_array_equal(extend_labels([2, 3]), [0, 2, 0, 3, 0])

    def test_matches_bruteforce_on_random_instances(self):
        r = np.random.default_rng(7)
        worst, checked = 0.0, 0
        for _ in range(200):
            logp, y = random_instance(r)
            a = ctc_loss(logp, y, infeasible="inf").item()
            b = ctc_loss_bruteforce(logp, y, infeasible="inf")
            if np.isinf(a) or np.isinf(b):
                assert np.isinf(a) and np.isinf(b)
                continue
            checked += 1
            worst = max(worst, abs(a - b))
        assert checked > 100
        assert worst <= 1e-9

    def test_gradient_wrt_logits(self):
        r = np.random.default_rng(11)
        worst = 0.0
        n = 0
        while n < 50:
            F, C = int(r.integers(2, 7)), int(r.integers(2, 5))
            y = r.integers(1, C, size=int(r.integers(1, 4)))
            if min_frames(y) > F:
                continue
            p = make_params(z=r.normal(size=(F, C)))
            worst = max(worst, ad.grad_check(lambda ps: ctc_loss(log_softmax(ps["z"]), y), p))
            n += 1
        assert worst <= 1e-4

    def test_gradient_of_unnormalised_scores(self, rng):
        p = make_params(s=rng.normal(size=(5, 4)))
        assert ad.grad_check(lambda ps: ctc_loss(ps["s"], [1, 3]), p) <= 1e-4

    def test_appending_a_sure_blank_frame_is_free(self, rng):
        z = rng.normal(size=(4, 3))
        logp = log_softmax_np(z)
        eps = 1e-12
        blank_row = np.log(np.array([[1 - eps, eps / 2, eps / 2]]))
        base = ctc_loss(logp, [1, 2]).item()
        longer = ctc_loss(np.vstack([logp, blank_row]), [1, 2]).item()
        assert abs(longer - base) <= 1e-6

    def test_teacher_scale_long_sequence_is_finite(self, rng):
        logp = log_softmax_np(rng.normal(size=(200, 11)) * 5)
        y = list(rng.integers(1, 11, size=40))
        assert np.isfinite(ctc_loss(logp, y, infeasible="inf").item())


class TestBruteforce:
    def test_enumeration_example(self):
        assert ctc_loss_bruteforce(np.log(np.full((2, 2), 0.5)), [1]) == pytest.approx(
            0.287682072451780927, abs=1e-12)

    def test_infeasible(self):
        with pytest.raises(InfeasibleAlignmentError):
            ctc_loss_bruteforce(np.log([[0.5, 0.5]]), [1, 1])

    def test_size_guard(self):
        with pytest.raises(SizeGuardError):
            ctc_loss_bruteforce(np.zeros((9, 2)), [1])
        with pytest.raises(SizeGuardError):
            ctc_loss_bruteforce(np.zeros((3, 6)), [1])


class TestGreedy:
    @staticmethod
    def rows(ids, C=4):
        return np.log(np.eye(C)[ids] * 0.9 + 0.1 / C)

    def test_collapse_then_remove_blanks(self):
        a, b = 1, 2
        assert greedy_decode(self.rows([a, a, BLANK, a, b, b])) == [a, a, b]

    def test_all_blank(self):
        assert greedy_decode(self.rows([0, 0, 0])) == []

    def test_single_label(self):
        assert greedy_decode(self.rows([0, 3, 0])) == [3]

    def test_accepts_tensors(self):
        assert greedy_decode(ad.Tensor(self.rows([2, 2, 0]))) == [2]

    def test_recovers_label_from_any_alignment(self, rng):
        for _ in range(100):
            y = list(rng.integers(1, 5, size=int(rng.integers(1, 6))))
            path = []
            for k, lab in enumerate(y):
                if k and (lab == y[k - 1] or rng.random() < 0.5):
                    path += [BLANK] * int(rng.integers(1, 3))
                path += [lab] * int(rng.integers(1, 4))
            if rng.random() < 0.5:
                path = [BLANK] + path + [BLANK]
            assert collapse(path) == tuple(y)
            assert greedy_decode(np.eye(5)[path]) == y
