import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quartznet.ctc import (
    Vocabulary,
    collapse,
    ctc_lattice,
    ctc_loss,
    ctc_loss_batch,
    ctc_loss_bruteforce,
    is_feasible,
    min_frames,
)
from quartznet.errors import ContractError, DataError, InfeasibleTarget
from quartznet.tensor import Tensor, log_softmax

from oracles import fd_grad, random_log_probs, random_target


def test_vocabulary():
    v = Vocabulary.english()
    assert v.size == 29 and v.blank_index == 28
    assert v.encode("a b") == [1, 0, 2]
    assert v.decode([1, 28, 0, 2]) == "a b"
    with pytest.raises(DataError, match="utt7"):
        v.encode("A", utt_id="utt7")
    with pytest.raises(ContractError):
        Vocabulary(("a", "a"))


def test_uniform_single_frame():
    loss, _ = ctc_loss(np.log(np.full((1, 3), 1 / 3)), [0], blank=2)
    assert loss == pytest.approx(math.log(3), abs=1e-12)


def test_infeasible_target():
    with pytest.warns(InfeasibleTarget):
        loss, grad = ctc_loss(np.log(np.full((1, 3), 1 / 3)), [0, 1], blank=2)
    assert loss == math.inf
    assert not grad.any()


def test_min_frames_counts_repeats():
    assert min_frames([0, 0, 1]) == 4
    assert min_frames([]) == 0
    assert is_feasible(3, [0, 1, 2]) and not is_feasible(3, [0, 0, 1])
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        ctc_loss(np.zeros((4, 3)), [0, 0, 1], blank=2)


def test_blank_in_target_rejected():
    with pytest.raises(ContractError):
        ctc_loss(np.zeros((3, 3)), [2], blank=2)


def test_matches_bruteforce_random(rng):
    for _ in range(60):
        T = int(rng.integers(1, 7))
        V = int(rng.integers(2, 5))
        L = int(rng.integers(0, 4))
        lp = random_log_probs(rng, T, V)
        target = random_target(rng, L, V)
        expected = ctc_loss_bruteforce(lp, target, V - 1)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", InfeasibleTarget)
            loss, _ = ctc_loss(lp, target, V - 1)
        if math.isinf(expected):
            assert math.isinf(loss)
        else:
            assert abs(loss - expected) < 1e-9


def test_alpha_equals_beta(rng):
    for _ in range(30):
        T, V = int(rng.integers(3, 30)), int(rng.integers(2, 8))
        target = random_target(rng, int(rng.integers(0, 4)), V)
        if not is_feasible(T, target):
            continue
        lat = ctc_lattice(random_log_probs(rng, T, V), target, V - 1)
        assert abs(lat.loss_alpha - lat.loss_beta) < 1e-9
        assert (lat.alpha <= 0).all() and (lat.beta <= 0).all()


def test_long_sequence_no_underflow(rng):
    lp = random_log_probs(rng, 400, 29)
    target = random_target(rng, 60, 29)
    lat = ctc_lattice(lp, target, 28)
    assert np.isfinite(lat.loss_alpha) and abs(lat.loss_alpha - lat.loss_beta) < 1e-6 * lat.loss_alpha


def test_gradient_matches_finite_differences(rng):
    for _ in range(20):
        T, V = int(rng.integers(2, 9)), int(rng.integers(2, 5))
        target = random_target(rng, int(rng.integers(0, 4)), V)
        if not is_feasible(T, target):
            continue
        lp = random_log_probs(rng, T, V)
        _, grad = ctc_loss(lp, target, V - 1)
        num = fd_grad(lambda x: ctc_loss(x, target, V - 1)[0], lp)
        assert np.abs(grad - num).max() / max(1.0, np.abs(num).max()) < 1e-5


def test_occupancy_rows_sum_to_one(rng):
    lp = random_log_probs(rng, 10, 4)
    _, grad = ctc_loss(lp, [0, 1, 1], 3)
    np.testing.assert_allclose(grad.sum(axis=1), -1.0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(2, 4), st.integers(0, 3), st.integers(0, 2**31))
def test_likelihood_in_unit_interval(T, V, L, seed):
    rng = np.random.default_rng(seed)
    target = random_target(rng, L, V)
    if not is_feasible(T, target):
        return
    loss, _ = ctc_loss(random_log_probs(rng, T, V), target, V - 1)
    assert 0 < math.exp(-loss) <= 1


def test_forced_alignment_has_zero_loss():
    lp = np.full((3, 4), -1e4)
    lp[[0, 1, 2], [0, 1, 2]] = 0.0
    loss, _ = ctc_loss(lp, [0, 1, 2], blank=3)
    assert math.exp(-loss) == pytest.approx(1.0, abs=1e-12)


def test_collapse():
    assert collapse([0, 0, 2, 0, 1], blank=2) == (0, 0, 1)
    assert collapse([2, 2], blank=2) == ()


def test_batch_loss_ignores_padding(rng):
    B, T, V = 3, 8, 4
    logits = rng.normal(size=(B, T, V))
    targets = [[0, 1], [2, 2, 2], [1]]
    lengths = [8, 5, 4]  # second target needs 5 frames and is feasible

    x = Tensor(logits, requires_grad=True)
    loss, skipped = ctc_loss_batch(log_softmax(x, -1), targets, lengths, blank=3)
    loss.backward()
    assert skipped == 0
    expected = np.mean([
        ctc_loss_bruteforce(log_softmax(Tensor(logits[b, : lengths[b]]), -1).data, targets[b], 3) for b in range(B)
    ])
    assert loss.item() == pytest.approx(expected, abs=1e-9)
    assert not x.grad[1, 5:].any() and not x.grad[2, 4:].any()


def test_batch_loss_skips_infeasible(rng):
    lp = Tensor(random_log_probs(rng, 4, 3)[None].repeat(2, axis=0))
    loss, skipped = ctc_loss_batch(lp, [[0], [0, 0, 0]], [4, 4], blank=2)
    assert skipped == 1
    assert loss.item() == pytest.approx(ctc_loss(lp.data[0], [0], 2)[0])
    loss, skipped = ctc_loss_batch(lp, [[0, 0, 0]] * 2, [4, 4], blank=2)
    assert skipped == 2 and math.isinf(loss.item())


def test_bruteforce_enumerates_all_paths():
    # with uniform probabilities the brute force count is the number of valid paths
    T, V = 4, 3
    lp = np.log(np.full((T, V), 1 / V))
    n_paths = sum(1 for p in itertools.product(range(V), repeat=T) if collapse(p, 2) == (0, 1))
    assert ctc_loss_bruteforce(lp, [0, 1], 2) == pytest.approx(-math.log(n_paths / V**T))
