"""
Unit tests for attack module.
"""

import unittest

import numpy as np

from src import tensor as T
from src.attack import AttackConfig, fgsm, input_gradient
from src.diffnet import DiffTransformer, ModelConfig
from src.tensor import Tensor

SMALL = ModelConfig(image_size=8, patch=4, channels=8, heads=2, blocks=1, num_classes=3)


class LinearSurrogate:
    """Two-class model with logits [0, w . x + b]; w repeats across channels."""

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        plane = rng.choice([-1.0, 1.0], size=(8, 8)) * rng.uniform(0.5, 1.0, size=(8, 8))
        self.w = np.repeat(plane[None], 3, axis=0)
        self.b = 0.1

    def __call__(self, x):
        flat = T.reshape(x, (x.shape[0], -1))
        score = T.add(T.matmul(flat, Tensor(self.w.reshape(-1, 1))), self.b)
        return T.concat([Tensor(np.zeros((x.shape[0], 1))), score], axis=1)

    def loss(self, images):
        with T.no_grad():
            return T.cross_entropy(self(Tensor(images)), np.zeros(len(images), dtype=int)).item()


class TestAttackConfig(unittest.TestCase):
    """Tests for AttackConfig."""

    def test_from_levels(self):
        """Test budgets in pixel levels divide by 255."""
        self.assertAlmostEqual(AttackConfig.from_levels(8).epsilon, 8 / 255)

    def test_invalid_budget(self):
        """Test negative, non-finite budgets and other norms raise."""
        for eps in (-0.1, float("nan"), float("inf")):
            with self.assertRaises(ValueError):
                AttackConfig(eps)
        with self.assertRaises(ValueError):
            AttackConfig(0.1, norm="2")


class TestFgsm(unittest.TestCase):
    """Tests for the fast gradient sign method."""

    def setUp(self):
        rng = np.random.default_rng(1)
        plane = rng.uniform(0.1, 0.9, size=(4, 1, 8, 8))
        self.images = np.repeat(plane, 3, axis=1)
        self.labels = np.array([0, 1, 2, 1])

    def test_zero_budget_is_identity(self):
        """Test eps = 0 returns an equal copy."""
        model = DiffTransformer(SMALL).eval()
        adversarial = fgsm(model, self.images, self.labels, AttackConfig(0.0))
        np.testing.assert_array_equal(adversarial, self.images)
        self.assertIsNot(adversarial, self.images)

    def test_budget_and_range(self):
        """Test the perturbation stays within eps and the image within [0, 1]."""
        model = DiffTransformer(SMALL).eval()
        images = np.clip(self.images + np.array([-0.2, 0.2, 0.0, 0.0])[:, None, None, None], 0, 1)
        for levels in (3, 8, 14):
            cfg = AttackConfig.from_levels(levels)
            adversarial = fgsm(model, images, self.labels, cfg)
            self.assertEqual(adversarial.dtype, np.float64)
            self.assertLessEqual(np.abs(adversarial - images).max(), cfg.epsilon + 1e-12)
            self.assertTrue(np.all((adversarial >= 0) & (adversarial <= 1)))

    def test_channels_stay_identical(self):
        """Test identical input channels receive identical perturbations."""
        model = DiffTransformer(SMALL).eval()
        adversarial = fgsm(model, self.images, self.labels, AttackConfig(0.05))
        np.testing.assert_array_equal(adversarial[:, 0], adversarial[:, 1])
        np.testing.assert_array_equal(adversarial[:, 0], adversarial[:, 2])

    def test_linear_surrogate_moves_along_sign_of_weights(self):
        """Test the perturbation equals eps * sign(w) for a linear model."""
        model = LinearSurrogate()
        adversarial = fgsm(model, self.images, np.zeros(4, dtype=int), AttackConfig(0.05))
        np.testing.assert_allclose(adversarial - self.images, 0.05 * np.sign(model.w)[None].repeat(4, axis=0),
                                   atol=1e-12)

    def test_loss_does_not_decrease(self):
        """Test the attack raises the cross-entropy of a linear model."""
        model = LinearSurrogate(seed=2)
        before = model.loss(self.images)
        after = model.loss(fgsm(model, self.images, np.zeros(4, dtype=int), AttackConfig(0.02)))
        self.assertGreater(after, before)

    def test_single_image_and_params_untouched(self):
        """Test a single image keeps its shape and weights get no gradient."""
        model = DiffTransformer(SMALL).eval()
        adversarial = fgsm(model, self.images[0], 1, AttackConfig(0.03))
        self.assertEqual(adversarial.shape, (3, 8, 8))
        self.assertTrue(all(p.grad is None for p in model.parameters()))

    def test_input_gradient_shape(self):
        """Test the input gradient matches the image batch."""
        model = DiffTransformer(SMALL).eval()
        self.assertEqual(input_gradient(model, self.images, self.labels).shape, self.images.shape)


if __name__ == "__main__":
    unittest.main()
