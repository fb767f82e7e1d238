import math

import numpy as np
import pytest

from faew.encoder import EncoderConfig
from faew.errors import DataError
from faew.head import ChangeDetector, ChangeMap, ModelConfig, PyramidDecoder, loss_ce
from faew.msafa import ConcatFusion, FlowFusion
from faew.tensor import Tensor, backward


def tiny_model_cfg(msafa=True, dafa=True):
    enc = EncoderConfig(image_size=16, patch=4, dim=8, blocks="LG", window=2, heads=2, dafa=dafa)
    return ModelConfig(encoder=enc, msafa=msafa, fuse_channels=8, fuse_groups=4,
                       decoder_width=4, decoder_hidden=8)


class TestLoss:
    def test_zero_logits_give_ln2(self):
        cmap = ChangeMap(Tensor(np.zeros((2, 2, 3, 3))))
        mask = np.random.default_rng(0).integers(0, 2, (2, 1, 3, 3))
        assert float(loss_ce(cmap, mask).data) == pytest.approx(math.log(2), abs=1e-7)

    def test_per_pixel_oracle(self, rng):
        logits = rng.standard_normal((2, 2, 4, 5))
        mask = rng.integers(0, 2, (2, 1, 4, 5))
        want = 0.0
        for n in range(2):
            for i in range(4):
                for j in range(5):
                    l0, l1 = logits[n, :, i, j]
                    target = (l0, l1)[mask[n, 0, i, j]]
                    want -= target - math.log(math.exp(l0) + math.exp(l1))
        got = float(loss_ce(ChangeMap(Tensor(logits)), mask).data)
        assert got == pytest.approx(want / 40, abs=1e-12)

    @pytest.mark.parametrize("margin,bound", [(10.0, 1e-4), (30.0, 1e-12)])
    def test_confident_correct_logits_near_zero(self, margin, bound):
        mask = np.array([[[[1, 0], [0, 1]]]])
        logits = np.concatenate([(1 - mask) * margin, mask * margin], axis=1).astype(np.float64)
        assert float(loss_ce(ChangeMap(Tensor(logits)), mask).data) < bound

    def test_confident_wrong_logits_are_large(self):
        mask = np.ones((1, 1, 2, 2), int)
        logits = np.zeros((1, 2, 2, 2))
        logits[:, 0] = 20.0
        assert float(loss_ce(ChangeMap(Tensor(logits)), mask).data) == pytest.approx(20.0, abs=1e-6)

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = Tensor(rng.standard_normal((1, 2, 2, 3)), requires_grad=True)
        mask = rng.integers(0, 2, (1, 1, 2, 3))
        backward(loss_ce(ChangeMap(logits), mask))
        p = np.exp(logits.data) / np.exp(logits.data).sum(axis=1, keepdims=True)
        onehot = np.concatenate([1 - mask, mask], axis=1)
        np.testing.assert_allclose(logits.grad, (p - onehot) / 6, rtol=0, atol=1e-14)

    def test_non_binary_mask(self):
        with pytest.raises(DataError):
            loss_ce(ChangeMap(Tensor(np.zeros((1, 2, 2, 2)))), np.full((1, 1, 2, 2), 2))

    def test_mask_shape_mismatch(self):
        with pytest.raises(DataError):
            loss_ce(ChangeMap(Tensor(np.zeros((1, 2, 2, 2)))), np.zeros((1, 1, 3, 2)))


class TestChangeMap:
    def test_ties_are_unchanged(self):
        assert not ChangeMap(Tensor(np.zeros((1, 2, 3, 3)))).prediction().any()

    def test_probabilities_sum_to_one(self, rng):
        p = ChangeMap(Tensor(rng.standard_normal((2, 2, 3, 3)) * 50)).probabilities()
        np.testing.assert_allclose(p.sum(axis=1), 1.0)


class TestDecoder:
    @pytest.mark.parametrize("grid,out", [(4, 16), (8, 64), (16, 64)])
    def test_output_resolution(self, rng, grid, out):
        dec = PyramidDecoder(6, rng, width=4, hidden=8, dtype=np.float64)
        cmap = dec(Tensor(rng.standard_normal((2, 6, grid, grid))), (out, out))
        assert cmap.logits.shape == (2, 2, out, out)

    def test_bias_only_decoder_predicts_bias_argmax(self, rng):
        dec = PyramidDecoder(6, rng, width=4, hidden=8, dtype=np.float64)
        for _, p in dec.named_parameters():
            p.data[...] = 0.0
        dec.proj2.bias.data[...] = [-0.5, 0.25]
        cmap = dec(Tensor(rng.standard_normal((1, 6, 4, 4))), (16, 16))
        np.testing.assert_allclose(cmap.logits.data[0, 0], -0.5)
        assert cmap.prediction().all()


class TestDetector:
    @pytest.mark.parametrize("msafa,fuse_cls", [(True, FlowFusion), (False, ConcatFusion)])
    def test_topology(self, rng, msafa, fuse_cls):
        model = ChangeDetector(tiny_model_cfg(msafa=msafa), rng, np.float64)
        assert isinstance(model.fuse, fuse_cls)
        x = Tensor(rng.standard_normal((1, 3, 16, 16)))
        assert model(x, x).logits.shape == (1, 2, 16, 16)

    def test_baseline_has_no_adapter(self, rng):
        model = ChangeDetector(tiny_model_cfg(msafa=False, dafa=False), rng)
        assert model.encoder.dafa is None
        assert not any(n.startswith("encoder.dafa") for n, _ in model.named_parameters())

    def test_same_seed_same_weights(self):
        a = ChangeDetector(tiny_model_cfg(), np.random.default_rng(3))
        b = ChangeDetector(tiny_model_cfg(), np.random.default_rng(3))
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb and np.array_equal(pa.data, pb.data)

    def test_loss_backpropagates_to_all_trainable_paths(self, rng):
        model = ChangeDetector(tiny_model_cfg(), rng, np.float64)
        x0, x1 = (Tensor(rng.standard_normal((1, 3, 16, 16))) for _ in range(2))
        backward(loss_ce(model(x0, x1), rng.integers(0, 2, (1, 1, 16, 16))))
        for name in ("encoder.patch_embed.weight", "fuse.flow_proj.weight", "decoder.proj2.weight",
                     "encoder.dafa.out_proj.weight", "encoder.blocks.0.attn.q.lora_b"):
            grad = dict(model.named_parameters())[name].grad
            assert grad is not None and np.any(grad != 0), name
