import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l2caf import autodiff as ad
from l2caf.autodiff import Tensor
from l2caf.losses import (MiniBatch, TripletConfig, batch_npair_loss, batch_triplet_loss, npair_loss,
                          npair_structure, npair_term, semi_hard_from_distances, semi_hard_negatives, triplet_loss)

import oracles


class TestTriplet:
    def test_hinge_clamps(self):
        assert triplet_loss(0.1, 0.5, TripletConfig(0.2)) == 0.0

    def test_equal_distances_zero_margin(self):
        assert triplet_loss(0.7, 0.7, TripletConfig(0.0)) == 0.0

    def test_direct_value(self):
        assert triplet_loss(0.5, 0.4, TripletConfig(0.2)) == pytest.approx(0.3, abs=1e-15)

    def test_negative_distance_rejected(self):
        with pytest.raises(ValueError):
            triplet_loss(-0.1, 0.3)

    def test_negative_margin_rejected(self):
        with pytest.raises(ValueError):
            TripletConfig(-0.5)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(0, 5), st.floats(0, 5), st.floats(0, 1), st.floats(0, 1))
    def test_monotone(self, d_ap, d_an, m, step):
        cfg = TripletConfig(m)
        base = triplet_loss(d_ap, d_an, cfg)
        assert base >= 0
        assert triplet_loss(d_ap + step, d_an, cfg) >= base
        assert triplet_loss(d_ap, d_an + step, cfg) <= base


class TestSemiHard:
    def test_band_membership(self):
        got = semi_hard_from_distances(0.3, np.array([0.35, 0.45, 0.55]), TripletConfig(0.2))
        assert got.tolist() == [0, 1]

    def test_fallback_to_hardest(self):
        got = semi_hard_from_distances(0.1, np.array([0.9, 0.5, 0.7]), TripletConfig(0.2))
        assert got.tolist() == [1]

    def test_inside_positive_radius_excluded(self):
        got = semi_hard_from_distances(0.3, np.array([0.2, 0.4]), TripletConfig(0.2))
        assert got.tolist() == [1]

    def test_no_negatives(self):
        batch = MiniBatch(np.eye(3), [0, 0, 0])
        with pytest.raises(ValueError):
            semi_hard_negatives(batch, 0, 1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 10_000))
    def test_subset_of_other_labels(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 3, size=8)
        labels[:2] = [0, 0]
        labels[2] = 1
        batch = MiniBatch(rng.normal(size=(8, 3)), labels)
        got = semi_hard_negatives(batch, 0, 1)
        assert np.all(labels[got] != labels[0])


class TestNPair:
    def test_negative_count(self):
        labels = np.repeat(np.arange(5), 2)
        positives, negatives = npair_structure(labels)
        assert negatives.shape == (10, 8)
        assert all(labels[positives[i]] == labels[i] and positives[i] != i for i in range(10))

    def test_uniform_logits_give_log_four(self):
        a = np.array([0.3, -0.2])
        assert npair_term(a, a, np.tile(a, (3, 1))) == pytest.approx(math.log(4), abs=1e-12)

    def test_uniform_batch(self):
        e = np.array([[1.0, 0.0]] * 8)
        # four classes leave b - 2 = 6 negatives per anchor
        assert npair_loss(MiniBatch(e, np.repeat(np.arange(4), 2))) == pytest.approx(math.log(7), abs=1e-12)

    def test_dominant_positive_goes_to_zero(self):
        e = np.array([[10.0, 0], [10.0, 0], [0, 10.0], [0, 10.0]])
        assert npair_loss(MiniBatch(e, [0, 0, 1, 1])) < 1e-40

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            e = rng.normal(size=(8, 5))
            labels = rng.permutation(np.repeat(np.arange(4), 2))
            assert npair_loss(MiniBatch(e, labels)) == pytest.approx(oracles.npair(e, labels), abs=1e-12)

    def test_duplicate_class_rejected(self):
        with pytest.raises(ValueError):
            npair_loss(MiniBatch(np.eye(4), [0, 0, 0, 1]))

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        e = rng.normal(size=(6, 3))
        labels = np.array([0, 0, 1, 1, 2, 2])
        perm = rng.permutation(6)
        a = npair_loss(MiniBatch(e, labels))
        b = npair_loss(MiniBatch(e[perm], labels[perm]))
        assert a == pytest.approx(b, abs=1e-12)

    def test_tape_loss_matches_float_loss(self):
        rng = np.random.default_rng(2)
        e = rng.normal(size=(8, 4))
        labels = np.repeat(np.arange(4), 2)
        assert batch_npair_loss(Tensor(e), labels).item() == pytest.approx(npair_loss(MiniBatch(e, labels)), abs=1e-12)


def _fd_rel(fn, x):
    t = ad.parameter(x)
    fn(t).backward()
    num = ad.numerical_grad(lambda v: fn(Tensor(v)).item(), x)
    return np.max(np.abs(t.grad - num)) / max(np.max(np.abs(num)), 1e-3)


def test_loss_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    labels = np.repeat(np.arange(3), 2)
    for _ in range(5):
        e = rng.uniform(-1, 1, size=(6, 4))
        assert _fd_rel(lambda t: batch_npair_loss(t, labels), e) < 1e-6
        # hold the mined triples fixed so the loss is smooth around e
        assert _fd_rel(lambda t: batch_triplet_loss(t, labels, TripletConfig(1.0)), e) < 1e-6
