"""
Unit tests for diffnet module.
"""

import unittest

import numpy as np

from src import tensor as T
from src.diffnet import (DiffTransformer, EluBlock, EncoderBlock, ModelConfig, MultiDiff, PatchEmbed,
                         check_active, count_flops, diff_attention, diff_scores, elu_block, encoder_block,
                         forward, multi_diff, patch_embed, patch_split, predict,
                         predict_from_logits)
from src.tensor import ShapeError, Tensor, default_dtype

SMALL = ModelConfig(image_size=8, patch=4, channels=8, heads=2, blocks=1, num_classes=3)


def softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def layer_norm(x, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(x.var(axis=-1, keepdims=True) + eps)


def patch_merge(patches, cfg=ModelConfig()):
    """Reassemble (N, C * p * p) patches into a (C, H, W) image."""
    g, p = cfg.grid, cfg.patch
    grid = np.asarray(patches).reshape(g, g, cfg.in_channels, p, p)
    return grid.transpose(2, 0, 3, 1, 4).reshape(cfg.in_channels, cfg.image_size, cfg.image_size)


class TestPatches(unittest.TestCase):
    """Tests for patch split and merge."""

    def setUp(self):
        self.images = np.random.default_rng(0).uniform(size=(2, 3, 40, 40)).astype(np.float32)

    def test_shapes(self):
        """Test 40x40 images split into 100 patches of 48 values."""
        self.assertEqual(patch_split(self.images).shape, (2, 100, 48))
        self.assertEqual(patch_split(self.images[0]).shape, (100, 48))

    def test_merge_inverts_split(self):
        """Test the inverse reshape reassembles the image exactly."""
        np.testing.assert_array_equal(patch_merge(patch_split(self.images[1]).data), self.images[1])

    def test_locality(self):
        """Test patch order is row-major and each patch is channel-major."""
        patches = patch_split(self.images[0]).data
        np.testing.assert_array_equal(patches[0], self.images[0, :, 0:4, 0:4].reshape(-1))
        np.testing.assert_array_equal(patches[1], self.images[0, :, 0:4, 4:8].reshape(-1))
        np.testing.assert_array_equal(patches[10], self.images[0, :, 4:8, 0:4].reshape(-1))
        np.testing.assert_array_equal(patches[99], self.images[0, :, 36:40, 36:40].reshape(-1))

    def test_wrong_shape(self):
        """Test images of another size raise."""
        with self.assertRaises(ShapeError):
            patch_split(np.zeros((3, 32, 32)))


class TestPatchEmbed(unittest.TestCase):
    """Tests for the patch embedding."""

    def test_shape_and_relu(self):
        """Test (B, 100, 48) tokens embed to nonnegative (B, 100, 32)."""
        embed = PatchEmbed(ModelConfig(), np.random.default_rng(1))
        tokens = np.random.default_rng(2).uniform(size=(3, 100, 48)).astype(np.float32)
        out = patch_embed(tokens, embed, training=True).data
        self.assertEqual(out.shape, (3, 100, 32))
        self.assertTrue(np.all(out >= 0))
        self.assertEqual(patch_embed(tokens[0], embed, training=False).shape, (100, 32))

    def test_zero_weights_give_zero(self):
        """Test zero kernel and bias give zero output."""
        embed = PatchEmbed(ModelConfig(), np.random.default_rng(1))
        embed.weight.data[...] = 0
        embed.bias.data[...] = 0
        out = patch_embed(np.ones((2, 100, 48)), embed, training=True).data
        np.testing.assert_array_equal(out, 0)

    def test_token_width_checked(self):
        """Test tokens of the wrong width raise."""
        embed = PatchEmbed(ModelConfig(), np.random.default_rng(1))
        with self.assertRaises(ShapeError):
            patch_embed(np.ones((100, 47)), embed)


class TestDiffAttention(unittest.TestCase):
    """Tests for differential attention."""

    def setUp(self):
        rng = np.random.default_rng(3)
        self.x = rng.standard_normal((5, 6))
        self.w_q = rng.standard_normal((6, 4))
        self.w_k = rng.standard_normal((6, 4))
        self.w_v = rng.standard_normal((6, 2))

    def attention(self, lam, w_q=None, w_k=None):
        with default_dtype(np.float64):
            return diff_attention(Tensor(self.x), Tensor(self.w_q if w_q is None else w_q),
                                  Tensor(self.w_k if w_k is None else w_k), Tensor(self.w_v), lam).data

    def test_lambda_zero_is_standard_attention(self):
        """Test lam = 0 reduces to softmax(Q1 K1^T / sqrt(d)) V."""
        q1, k1, v = self.x @ self.w_q[:, :2], self.x @ self.w_k[:, :2], self.x @ self.w_v
        expected = softmax(q1 @ k1.T / np.sqrt(2)) @ v
        np.testing.assert_allclose(self.attention(0.0), expected, rtol=1e-10)

    def test_tied_maps_scale_by_one_minus_lambda(self):
        """Test identical maps give (1 - lam) times standard attention."""
        w_q = np.concatenate([self.w_q[:, :2]] * 2, axis=1)
        w_k = np.concatenate([self.w_k[:, :2]] * 2, axis=1)
        tied = self.attention(0.8, w_q, w_k)
        np.testing.assert_allclose(tied, 0.2 * self.attention(0.0, w_q, w_k), rtol=1e-10)

    def test_score_rows_sum_to_one_minus_lambda(self):
        """Test each differential score row sums to 1 - lam."""
        rng = np.random.default_rng(4)
        q1, k1, q2, k2 = (Tensor(rng.standard_normal((7, 3))) for _ in range(4))
        scores = diff_scores(q1, k1, q2, k2, 0.8).data
        np.testing.assert_allclose(scores.sum(axis=-1), 0.2, atol=1e-6)

    def test_two_tokens_one_dim(self):
        """Test N = 2, d = 1 against a hand-computed result."""
        x = np.array([[1.0], [2.0]])
        with default_dtype(np.float64):
            out = diff_attention(Tensor(x), Tensor([[1.0, 0.5]]), Tensor([[1.0, -1.0]]), Tensor([[1.0]]), 0.5).data
        first = softmax(np.array([[1.0, 2.0], [2.0, 4.0]]))
        second = softmax(np.array([[-0.5, -1.0], [-1.0, -2.0]]))
        np.testing.assert_allclose(out, (first - 0.5 * second) @ x, rtol=1e-12)

    def test_projection_width_checked(self):
        """Test w_q without 2d columns raises."""
        with self.assertRaises(ShapeError):
            diff_attention(Tensor(self.x), Tensor(self.w_q[:, :3]), Tensor(self.w_k), Tensor(self.w_v))


class TestMultiDiff(unittest.TestCase):
    """Tests for the multi-head layer."""

    def setUp(self):
        with default_dtype(np.float64):
            self.attn = MultiDiff(SMALL, np.random.default_rng(5))
        self.x = np.random.default_rng(6).standard_normal((2, 4, 8))

    def test_matches_per_head_reference(self):
        """Test against per-head attention, layer norm, (1 - lam) scaling and w_o."""
        a = self.attn
        with default_dtype(np.float64):
            out = multi_diff(Tensor(self.x), a).data
        heads = []
        for i in range(2):
            with default_dtype(np.float64):
                head = diff_attention(Tensor(self.x), Tensor(a.w_q.data[i]), Tensor(a.w_k.data[i]),
                                      Tensor(a.w_v.data[i]), a.lam).data
            heads.append((1 - a.lam) * layer_norm(head))
        expected = np.concatenate(heads, axis=-1) @ a.w_o.data
        np.testing.assert_allclose(out, expected, rtol=1e-8, atol=1e-10)

    def test_token_permutation_equivariant(self):
        """Test permuting tokens permutes the output the same way."""
        perm = np.array([2, 0, 3, 1])
        with default_dtype(np.float64):
            out = multi_diff(Tensor(self.x), self.attn).data
            permuted = multi_diff(Tensor(self.x[:, perm]), self.attn).data
        np.testing.assert_allclose(permuted, out[:, perm], rtol=1e-10, atol=1e-12)


class TestBlocks(unittest.TestCase):
    """Tests for the feed-forward and encoder blocks."""

    def test_elu_zero_and_reference(self):
        """Test the gated unit maps 0 to 0 and matches its formula."""
        with default_dtype(np.float64):
            elu = EluBlock(SMALL, np.random.default_rng(7))
            x = np.random.default_rng(8).standard_normal((4, 8))
            np.testing.assert_array_equal(elu_block(Tensor(np.zeros((4, 8))), elu).data, 0)
            out = elu_block(Tensor(x), elu).data
        h1 = x @ elu.w1.data
        expected = (h1 / (1 + np.exp(-h1)) * (x @ elu.w2.data)) @ elu.w3.data
        np.testing.assert_allclose(out, expected, rtol=1e-10)

    def test_encoder_identity_with_zero_output_maps(self):
        """Test zeroed w_o and w3 make the block the identity."""
        with default_dtype(np.float64):
            block = EncoderBlock(SMALL, np.random.default_rng(9))
            block.attn.w_o.data[...] = 0
            block.elu.w3.data[...] = 0
            x = np.random.default_rng(10).standard_normal((2, 4, 8))
            np.testing.assert_array_equal(encoder_block(Tensor(x), block).data, x)


class TestForward(unittest.TestCase):
    """Tests for the full classifier."""

    def setUp(self):
        self.model = DiffTransformer(ModelConfig(), seed=0).eval()
        self.images = np.random.default_rng(11).uniform(size=(2, 3, 40, 40)).astype(np.float32)

    def test_logit_shapes(self):
        """Test a single image gives (8,) logits and a batch (B, 8)."""
        self.assertEqual(forward(self.model, self.images[0]).shape, (8,))
        self.assertEqual(forward(self.model, self.images).shape, (2, 8))
        self.assertEqual(self.model.features(self.images).shape, (2, 32))

    def test_masked_patch_has_no_effect(self):
        """Test pixels of an excluded patch cannot change the logits."""
        active = np.arange(1, 100)
        altered = self.images.copy()
        altered[:, :, 0:4, 0:4] = 1.0 - altered[:, :, 0:4, 0:4]
        np.testing.assert_array_equal(forward(self.model, self.images, active).data,
                                      forward(self.model, altered, active).data)

    def test_masked_patch_gets_zero_gradient(self):
        """Test the input gradient vanishes on excluded patches only."""
        x = Tensor(self.images, requires_grad=True)
        loss = T.cross_entropy(forward(self.model, x, np.arange(1, 100)), [0, 3])
        (gradient,) = T.grad(loss, [x])
        np.testing.assert_array_equal(gradient[:, :, 0:4, 0:4], 0)
        self.assertGreater(np.abs(gradient[:, :, 4:8, 0:4]).sum(), 0)

    def test_masking_property_random_pairs(self):
        """Test invariance and zero gradient for 100 random mask and input pairs."""
        model = DiffTransformer(SMALL, seed=2).eval()
        rng = np.random.default_rng(15)
        for _ in range(100):
            active = np.sort(rng.choice(4, size=int(rng.integers(1, 4)), replace=False))
            hidden = int(rng.choice(np.setdiff1d(np.arange(4), active)))
            row, col = divmod(hidden, 2)
            images = rng.uniform(size=(2, 3, 8, 8))
            altered = images.copy()
            altered[:, :, 4 * row:4 * row + 4, 4 * col:4 * col + 4] = rng.uniform(size=(2, 3, 4, 4))
            np.testing.assert_array_equal(forward(model, images, active).data, forward(model, altered, active).data)
            x = Tensor(images, requires_grad=True)
            (gradient,) = T.grad(T.cross_entropy(forward(model, x, active), [0, 1]), [x])
            np.testing.assert_array_equal(gradient[:, :, 4 * row:4 * row + 4, 4 * col:4 * col + 4], 0)

    def test_same_seed_same_weights(self):
        """Test the seed fixes the initialization."""
        other = DiffTransformer(ModelConfig(), seed=0).eval()
        np.testing.assert_array_equal(forward(self.model, self.images).data, forward(other, self.images).data)

    def test_noise_requires_generator(self):
        """Test feature noise without a generator raises."""
        with self.assertRaises(ValueError):
            self.model(self.images, noise_std=0.1)

    def test_check_active(self):
        """Test invalid active sets raise."""
        np.testing.assert_array_equal(check_active({3, 1}, 100), [1, 3])
        for bad in ([], [100], [-1], [2, 2]):
            with self.assertRaises(ValueError):
                check_active(bad, 100)


class TestPredict(unittest.TestCase):
    """Tests for prediction helpers."""

    def test_ties_go_to_lowest_index(self):
        """Test argmax ties resolve to the first class."""
        self.assertEqual(int(predict_from_logits(np.array([0.5, 2.0, 2.0]))), 1)

    def test_predict_matches_logits(self):
        """Test batched prediction equals the argmax of the logits."""
        model = DiffTransformer(ModelConfig(), seed=1).eval()
        images = np.random.default_rng(12).uniform(size=(5, 3, 40, 40)).astype(np.float32)
        labels = predict(model, images, batch_size=2)
        np.testing.assert_array_equal(labels, np.argmax(model(images).data, axis=-1))
        self.assertIsInstance(predict(model, images[0]), int)


class TestSizeAndFlops(unittest.TestCase):
    """Tests for parameter and FLOP counts."""

    def test_parameter_count(self):
        """Test the default classifier has 29,928 parameters."""
        self.assertEqual(DiffTransformer(ModelConfig()).num_parameters(), 29_928)

    def test_flops_breakdown(self):
        """Test the analytic FLOP count of the default classifier."""
        report = count_flops(ModelConfig())
        self.assertEqual(report.total, 10_998_912)
        self.assertEqual(report.breakdown["patch_embed"], 940_800)
        self.assertEqual(report.breakdown["block1"], 5_027_200)
        self.assertEqual(report.breakdown["block2"], 5_027_200)
        self.assertEqual(report.breakdown["gap"], 3_200)
        self.assertEqual(report.breakdown["head"], 512)
        self.assertEqual(report.weight_macs, 2_918_656)
        self.assertEqual(report.total, sum(report.breakdown.values()))

    def test_flops_from_model_and_depth(self):
        """Test a model counts like its config and extra blocks cost more."""
        self.assertEqual(count_flops(DiffTransformer(SMALL)).total, count_flops(SMALL).total)
        self.assertGreater(count_flops(ModelConfig(blocks=3)).total, count_flops(ModelConfig()).total)

    def test_invalid_config(self):
        """Test inconsistent architectures raise."""
        with self.assertRaises(ValueError):
            ModelConfig(image_size=42)
        with self.assertRaises(ValueError):
            ModelConfig(channels=30)
        with self.assertRaises(ValueError):
            ModelConfig(lam=1.5)


class TestModelGradients(unittest.TestCase):
    """Finite-difference check of the full model in f64."""

    def test_parameter_gradients(self):
        """Test backprop through a small model against central differences."""
        with default_dtype(np.float64):
            model = DiffTransformer(SMALL, seed=3)
            images = np.random.default_rng(13).uniform(size=(3, 3, 8, 8))
            labels = np.array([0, 2, 1])

            def loss():
                return T.cross_entropy(model(images, track_stats=False), labels)

            T.backward(loss(), model.parameters())
            rng = np.random.default_rng(14)
            checked = [model.fc_weight, model.blocks[0].attn.w_q, model.blocks[0].elu.w1,
                       model.blocks[0].ln1_gamma, model.embed.weight, model.embed.gamma]
            for param in checked:
                for _ in range(6):
                    index = tuple(rng.integers(0, s) for s in param.shape)
                    original = param.data[index]
                    with T.no_grad():
                        param.data[index] = original + 1e-6
                        upper = loss().item()
                        param.data[index] = original - 1e-6
                        lower = loss().item()
                    param.data[index] = original
                    numeric = (upper - lower) / 2e-6
                    self.assertAlmostEqual(param.grad[index], numeric, delta=1e-5 + 1e-4 * abs(numeric),
                                           msg=f"{param.name}{index}")

    @staticmethod
    def central_difference(loss, param, index, step=1e-6):
        original = param.data[index]
        with T.no_grad():
            param.data[index] = original + step
            upper = loss().item()
            param.data[index] = original - step
            lower = loss().item()
        param.data[index] = original
        return (upper - lower) / (2 * step)

    def test_every_parameter_of_two_patch_model(self):
        """Test every weight of a two-block C=4, h=2 model run on two active patches."""
        cfg = ModelConfig(image_size=8, patch=4, channels=4, heads=2, blocks=2, num_classes=3)
        active = np.array([0, 3])
        with default_dtype(np.float64):
            model = DiffTransformer(cfg, seed=5)
            images = np.random.default_rng(15).uniform(size=(3, 3, 8, 8))
            labels = np.array([2, 0, 1])

            def loss():
                return T.cross_entropy(model(images, active, track_stats=False), labels)

            T.backward(loss(), model.parameters())
            for param in model.parameters():
                for index in np.ndindex(param.shape):
                    numeric = self.central_difference(loss, param, index)
                    self.assertAlmostEqual(param.grad[index], numeric, delta=1e-6 + 1e-4 * abs(numeric),
                                           msg=f"{param.name}{index}")

    def test_default_model_spot_check(self):
        """Test ten random weights of the default model to relative error 1e-3."""
        with default_dtype(np.float64):
            model = DiffTransformer(ModelConfig(), seed=1)
            images = np.random.default_rng(16).uniform(size=(2, 3, 40, 40))
            labels = np.array([3, 6])

            def loss():
                return T.cross_entropy(model(images, track_stats=False), labels)

            T.backward(loss(), model.parameters())
            params = model.parameters()
            rng = np.random.default_rng(17)
            for _ in range(10):
                param = params[int(rng.integers(len(params)))]
                index = tuple(int(rng.integers(0, s)) for s in param.shape)
                numeric = self.central_difference(loss, param, index, step=1e-5)
                analytic = param.grad[index]
                scale = max(abs(numeric), abs(analytic), 1e-6)
                self.assertLess(abs(analytic - numeric) / scale, 1e-3, msg=f"{param.name}{index}")


if __name__ == "__main__":
    unittest.main()
