import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvkc.descriptor import (
    LinearDescriptorHead,
    SampleRangeError,
    TrainingDivergedError,
    TrainingExample,
    apply_head,
    check_descriptor_map,
    contrastive_loss,
    contrastive_loss_vectors,
    dataset_loss,
    head_loss_and_grad,
    normalize,
    sample,
    sample_many,
    train_head,
)
from mvkc.skeleton import CorrespondencePairBatch
from mvkc.synth import head_dataset

FD_STEP = 1e-5


def rel_err(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def central_diff(f, x):
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + FD_STEP
        up = f()
        x[i] = old - FD_STEP
        down = f()
        x[i] = old
        grad[i] = (up - down) / (2 * FD_STEP)
    return grad


def random_batch(rng, h, w, n):
    xy1 = rng.uniform(0, [w - 1, h - 1], size=(n, 2))
    xy2 = rng.uniform(0, [w - 1, h - 1], size=(n, 2))
    labels = rng.integers(0, 2, n)
    return CorrespondencePairBatch(xy1, xy2, labels)


class TestNormalize:
    def test_three_four(self):
        np.testing.assert_allclose(normalize(np.array([3.0, 4.0])), [0.6, 0.8])

    def test_unit_vector_unchanged(self):
        v = np.array([0.0, 1.0, 0.0])
        np.testing.assert_array_equal(normalize(v), v)

    def test_zero_vector_becomes_e0(self):
        out = normalize(np.zeros((2, 2, 5)))
        np.testing.assert_array_equal(out[..., 0], 1.0)
        np.testing.assert_array_equal(out[..., 1:], 0.0)

    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, (3, 4, 6), elements=st.floats(-10, 10)))
    def test_idempotent(self, raw):
        once = normalize(raw)
        np.testing.assert_allclose(normalize(once), once, atol=1e-12)
        np.testing.assert_allclose(np.linalg.norm(once, axis=-1), 1.0, atol=1e-12)

    def test_check_descriptor_map_rejects_raw(self, rng):
        with pytest.raises(ValueError, match="unit-normalised"):
            check_descriptor_map(rng.normal(size=(3, 3, 4)))
        check_descriptor_map(normalize(rng.normal(size=(3, 3, 4))))


class TestSample:
    def test_integer_coords_exact(self, rng):
        dmap = normalize(rng.normal(size=(4, 5, 3)))
        np.testing.assert_allclose(sample(dmap, (3, 2)), dmap[2, 3], atol=1e-15)

    def test_midpoint_identical(self):
        dmap = np.tile([0.6, 0.8], (2, 2, 1))
        np.testing.assert_allclose(sample(dmap, (0.5, 0.5)), [0.6, 0.8], atol=1e-15)

    def test_midpoint_orthogonal(self):
        dmap = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        np.testing.assert_allclose(sample(dmap, (0.5, 0.0)), [1 / math.sqrt(2)] * 2, atol=1e-15)

    def test_last_pixel_is_in_bounds(self, rng):
        dmap = normalize(rng.normal(size=(4, 5, 3)))
        np.testing.assert_allclose(sample(dmap, (4, 3)), dmap[3, 4], atol=1e-15)

    @pytest.mark.parametrize("xy", [(-0.01, 0), (0, 3.5), (4.001, 1), (float("nan"), 0)])
    def test_out_of_bounds(self, xy, rng):
        dmap = normalize(rng.normal(size=(4, 5, 3)))
        with pytest.raises(SampleRangeError):
            sample(dmap, xy)

    def test_many_matches_single(self, rng):
        dmap = normalize(rng.normal(size=(6, 6, 4)))
        xy = rng.uniform(0, 5, size=(7, 2))
        many = sample_many(dmap, xy)
        for row, p in zip(many, xy):
            np.testing.assert_allclose(row, sample(dmap, p), atol=1e-15)


class TestContrastiveLoss:
    def test_identical_positive_is_zero(self):
        v = np.array([[0.6, 0.8]])
        rep = contrastive_loss_vectors(v, v.copy(), np.array([1]))
        assert rep.loss == 0.0
        np.testing.assert_array_equal(rep.grad1, 0.0)

    def test_inactive_negative(self):
        v1 = np.array([[1.0, 0.0]])
        v2 = np.array([[0.0, 1.0]])  # D^2 = 2 >= m
        rep = contrastive_loss_vectors(v1, v2, np.array([0]), margin=1.0)
        assert rep.loss == 0.0
        assert rep.n_negative_active == 0

    def test_two_pair_substitution(self):
        # positive D^2 = 0.25, negative D^2 = 0.09
        v1 = np.array([[1.0, 0.0], [1.0, 0.0]])
        v2 = np.array([[1.0, 0.5], [1.0, 0.3]])
        rep = contrastive_loss_vectors(v1, v2, np.array([1, 0]), margin=1.0)
        assert rep.loss == pytest.approx(0.29, abs=1e-15)
        np.testing.assert_allclose(rep.grad1, [[0.0, -0.25], [0.0, 0.15]])
        np.testing.assert_allclose(rep.grad2, -rep.grad1)

    def test_hinge_boundary_subgradient_is_zero(self):
        v1 = np.array([[1.0, 0.0]])
        v2 = np.array([[0.0, 0.0]])  # D^2 = 1 = m
        rep = contrastive_loss_vectors(v1, v2, np.array([0]), margin=1.0)
        np.testing.assert_array_equal(rep.grad1, 0.0)

    def test_empty_batch(self):
        with pytest.raises(ValueError, match="empty"):
            contrastive_loss_vectors(np.zeros((0, 2)), np.zeros((0, 2)), np.array([]))

    def test_bad_margin(self):
        with pytest.raises(ValueError, match="margin"):
            contrastive_loss_vectors(np.ones((1, 2)), np.ones((1, 2)), np.array([1]), margin=0)

    def test_unit_distance_identity(self, rng):
        L1 = normalize(rng.normal(size=(5, 5, 6)))
        L2 = normalize(rng.normal(size=(5, 5, 6)))
        d2 = np.sum((L1 - L2) ** 2, axis=-1)
        np.testing.assert_allclose(d2, 2 - 2 * np.sum(L1 * L2, axis=-1), atol=1e-9)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_non_negative(self, seed):
        rng = np.random.default_rng(seed)
        L1 = normalize(rng.normal(size=(4, 4, 3)))
        L2 = normalize(rng.normal(size=(4, 4, 3)))
        assert contrastive_loss(L1, L2, random_batch(rng, 4, 4, 6)).loss >= 0

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("margin", [0.5, 1.0, 2.0])
    def test_map_gradient_matches_finite_differences(self, seed, margin):
        rng = np.random.default_rng(seed)
        L1 = rng.normal(size=(4, 5, 3))
        L2 = rng.normal(size=(4, 5, 3))
        batch = random_batch(rng, 4, 5, 6)
        rep = contrastive_loss(L1, L2, batch, margin)
        num1 = central_diff(lambda: contrastive_loss(L1, L2, batch, margin).loss, L1)
        num2 = central_diff(lambda: contrastive_loss(L1, L2, batch, margin).loss, L2)
        assert rel_err(rep.grad_map1, num1) <= 1e-4
        assert rel_err(rep.grad_map2, num2) <= 1e-4


class TestHead:
    def test_identity_weights(self, rng):
        f = normalize(rng.normal(size=(3, 4, 5)))
        head = LinearDescriptorHead(np.eye(5), np.zeros(5))
        np.testing.assert_allclose(apply_head(head, f), f, atol=1e-15)

    def test_zero_head_gives_e0(self):
        head = LinearDescriptorHead(np.zeros((4, 3)), np.zeros(3))
        out = apply_head(head, np.ones((2, 2, 4)))
        np.testing.assert_array_equal(out, np.tile([1.0, 0.0, 0.0], (2, 2, 1)))

    def test_matches_loop_oracle(self, rng):
        head = LinearDescriptorHead.random(7, 5, seed=3, scale=1.0)
        head.bias = rng.normal(size=5)
        f = rng.normal(size=(6, 8, 7))
        out = apply_head(head, f)
        for y in range(6):
            for x in range(8):
                raw = [sum(f[y, x, c] * head.weight[c, j] for c in range(7)) + head.bias[j] for j in range(5)]
                norm = math.sqrt(sum(r * r for r in raw))
                np.testing.assert_allclose(out[y, x], np.array(raw) / norm, atol=1e-6)

    def test_shape_mismatch(self):
        head = LinearDescriptorHead.random(4, 3, seed=0)
        with pytest.raises(ValueError, match="input size 4"):
            apply_head(head, np.zeros((2, 2, 5)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError, match="finite"):
            LinearDescriptorHead(np.full((2, 2), np.nan), np.zeros(2))

    @pytest.mark.parametrize("seed", range(4))
    def test_parameter_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        head = LinearDescriptorHead(rng.normal(size=(5, 4)), rng.normal(size=4))
        f1 = rng.normal(size=(5, 6, 5))
        f2 = rng.normal(size=(5, 6, 5))
        batch = random_batch(rng, 5, 6, 8)
        _, gw, gb = head_loss_and_grad(head, f1, f2, batch)
        nw = central_diff(lambda: head_loss_and_grad(head, f1, f2, batch)[0], head.weight)
        nb = central_diff(lambda: head_loss_and_grad(head, f1, f2, batch)[0], head.bias)
        assert rel_err(gw, nw) <= 1e-4
        assert rel_err(gb, nb) <= 1e-4


@pytest.fixture(scope="module")
def small_data():
    return head_dataset(n_examples=3, size=(8, 8), seed=5)[1]


class TestTraining:
    def test_zero_learning_rate_keeps_parameters(self, small_data):
        head = LinearDescriptorHead.random(12, 8, seed=1)
        trained, trace = train_head(head, small_data, steps=5, learning_rate=0.0)
        np.testing.assert_array_equal(trained.weight, head.weight)
        assert len(set(trace)) == 1

    def test_deterministic(self, small_data):
        head = LinearDescriptorHead.random(12, 8, seed=1)
        _, a = train_head(head, small_data, steps=20, batch_size=2, rng_seed=9)
        _, b = train_head(head, small_data, steps=20, batch_size=2, rng_seed=9)
        assert a == b

    def test_does_not_mutate_input(self, small_data):
        head = LinearDescriptorHead.random(12, 8, seed=1)
        before = head.weight.copy()
        train_head(head, small_data, steps=3)
        np.testing.assert_array_equal(head.weight, before)

    def test_loss_decreases(self, small_data):
        head = LinearDescriptorHead.random(12, 8, seed=1)
        trained, trace = train_head(head, small_data, steps=100, learning_rate=0.01)
        assert dataset_loss(trained, small_data) < 0.5 * trace[0]

    def test_ground_truth_head_beats_random(self):
        gt, data = head_dataset(n_examples=4, seed=2)
        assert dataset_loss(gt, data) < dataset_loss(LinearDescriptorHead.random(12, 8, seed=0), data)

    def test_divergence_reports_step(self, small_data):
        bad = [TrainingExample(np.full((8, 8, 12), np.inf), ex.features2, ex.batch) for ex in small_data]
        with np.errstate(invalid="ignore"), pytest.raises(TrainingDivergedError) as info:
            train_head(LinearDescriptorHead.random(12, 8, seed=1), bad, steps=3)
        assert info.value.step == 1

    @pytest.mark.parametrize("kwargs", [{"steps": 0}, {"steps": 1, "dataset": []}])
    def test_bad_arguments(self, small_data, kwargs):
        args = {"dataset": small_data, **kwargs}
        with pytest.raises(ValueError):
            train_head(LinearDescriptorHead.random(12, 8, seed=1), **args)
