import math

import numpy as np
import pytest

from gpsvi import tensor as T
from gpsvi.data import Dataset, ExampleRecord, Vocab, make_batch
from gpsvi.errors import UnknownIdError
from gpsvi.models import CTRModel, Embedding, ModelConfig, predict_ctr, sum_pool, target_attention
from gpsvi.nn import MLP, Params
from gpsvi.tensor import Tensor

VOCAB = Vocab(n_items=12, n_contexts=3, group_sizes=(2, 3), max_seq_len=8)


def small_batch(seed=0, n=6):
    rng = np.random.default_rng(seed)
    records = [ExampleRecord(i, (int(rng.integers(2)), int(rng.integers(3))), int(rng.integers(12)),
                             int(rng.integers(3)), tuple(rng.integers(12, size=int(rng.integers(0, 8))).tolist()),
                             int(rng.integers(2))) for i in range(n)]
    return make_batch(Dataset(records, VOCAB).arrays(), np.arange(n))


class TestTargetAttention:
    def test_symmetric_query(self):
        out = target_attention(np.zeros(2), np.eye(2), np.array([[2.0, 0.0], [0.0, 4.0]]))
        np.testing.assert_allclose(out.alpha.values, [0.5, 0.5])
        np.testing.assert_allclose(out.v.values, [1.0, 2.0])

    def test_single_behavior(self):
        rng = np.random.default_rng(0)
        v1 = rng.normal(size=(1, 3))
        out = target_attention(rng.normal(size=3), rng.normal(size=(1, 3)), v1)
        np.testing.assert_allclose(out.v.values, v1[0], rtol=0, atol=1e-15)

    def test_two_keys(self):
        out = target_attention(np.array([1.0, 0.0]), np.eye(2), np.eye(2))
        e = math.e
        np.testing.assert_allclose(out.alpha.values, [e / (e + 1), 1 / (e + 1)], rtol=1e-14)
        np.testing.assert_allclose(out.alpha.values, [0.7311, 0.2689], atol=5e-5)
        np.testing.assert_allclose(out.v.values, [0.7311, 0.2689], atol=5e-5)

    def test_empty_history(self):
        out = target_attention(np.ones((1, 2)), np.ones((1, 3, 2)), np.ones((1, 3, 2)), mask=np.zeros((1, 3)))
        np.testing.assert_array_equal(out.v.values, [[0.0, 0.0]])
        assert out.empty_history.tolist() == [True]

    def test_zero_length(self):
        out = target_attention(np.ones((2, 4)), np.zeros((2, 0, 4)), np.zeros((2, 0, 4)), mask=np.zeros((2, 0)))
        np.testing.assert_array_equal(out.v.values, np.zeros((2, 4)))

    def test_weights_normalized_over_unmasked(self):
        rng = np.random.default_rng(1)
        mask = np.array([[1, 1, 0, 1, 0]])
        out = target_attention(rng.normal(size=(1, 3)), rng.normal(size=(1, 5, 3)), rng.normal(size=(1, 5, 3)), mask)
        a = out.alpha.values
        np.testing.assert_allclose(a.sum(), 1.0, rtol=0, atol=1e-12)
        assert (a >= 0).all() and (a[mask == 0] == 0).all()

    def test_padding_matches_unpadded(self):
        rng = np.random.default_rng(2)
        q, K, V = rng.normal(size=(1, 4)), rng.normal(size=(1, 3, 4)), rng.normal(size=(1, 3, 4))
        Kp = np.concatenate([K, rng.normal(size=(1, 2, 4)) * 50], axis=1)
        Vp = np.concatenate([V, rng.normal(size=(1, 2, 4)) * 50], axis=1)
        plain = target_attention(q, K, V).v.values
        padded = target_attention(q, Kp, Vp, mask=np.array([[1, 1, 1, 0, 0]])).v.values
        np.testing.assert_allclose(padded, plain, rtol=0, atol=1e-14)

    def test_permuting_masked_rows(self):
        rng = np.random.default_rng(3)
        q, K, V = rng.normal(size=(1, 4)), rng.normal(size=(1, 5, 4)), rng.normal(size=(1, 5, 4))
        mask = np.array([[1, 0, 1, 0, 0]])
        perm = [0, 4, 2, 1, 3]
        a = target_attention(q, K, V, mask).v.values
        b = target_attention(q, K[:, perm], V[:, perm], mask).v.values
        np.testing.assert_array_equal(a, b)

    def test_logit_shift_invariance(self):
        # adding c * q / |q|^2 to every key adds c to every logit
        rng = np.random.default_rng(4)
        q, K, V = rng.normal(size=4), rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        shifted = K + 3.7 * q / (q @ q)
        a = target_attention(q, K, V).alpha.values
        b = target_attention(q, shifted, V).alpha.values
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_bce_gradient_through_attention(self):
        rng = np.random.default_rng(5)
        q = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
        K = Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
        V = Tensor(rng.normal(size=(3, 5, 4)), requires_grad=True)
        mask = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1], [1, 0, 0, 0, 0]])
        w = Tensor(rng.normal(size=(4, 1)))
        y = np.array([1.0, 0.0, 1.0])

        def loss(q, K, V):
            v = target_attention(q, K, V, mask).v
            return T.mean(T.bce_with_logits(T.matmul(v, w).reshape(3), y))

        assert T.grad_check(loss, [q, K, V]) < 1e-4


class TestSumPool:
    def test_full_mask(self):
        np.testing.assert_array_equal(sum_pool(np.array([[1.0, 2.0], [3.0, 4.0]])).values, [4.0, 6.0])

    def test_empty_mask(self):
        np.testing.assert_array_equal(sum_pool(np.ones((2, 2)), mask=np.zeros(2)).values, [0.0, 0.0])

    def test_permutation_invariant(self):
        V = np.random.default_rng(0).normal(size=(5, 3))
        np.testing.assert_allclose(sum_pool(V).values, sum_pool(V[::-1]).values, rtol=0, atol=1e-14)


class TestDecoder:
    def decoder(self, zero=False):
        params = Params()
        mlp = MLP(params, "dec", [6, 4, 1], np.random.default_rng(0))
        if zero:
            for t in params.tensors():
                t.values = np.zeros(t.shape)
        return params, mlp

    def test_zero_weights_give_half(self):
        _, dec = self.decoder(zero=True)
        assert predict_ctr(dec, np.ones(2), [np.ones(2), np.ones(2)]) == 0.5

    def test_final_bias_is_monotone(self):
        params, dec = self.decoder()
        z, side = np.array([0.3, -1.0]), [np.ones(2), np.zeros(2)]
        before = predict_ctr(dec, z, side)
        params["dec.1.b"].values = params["dec.1.b"].values + 0.5
        assert predict_ctr(dec, z, side) > before

    def test_deterministic(self):
        _, dec = self.decoder()
        z = np.array([0.3, -1.0])
        assert predict_ctr(dec, z, [np.ones(2)] * 2) == predict_ctr(dec, z + 0.0, [np.ones(2)] * 2)


class TestEmbedding:
    def test_unknown_id(self):
        emb = Embedding(Params(), "emb.item", 5, 3, np.random.default_rng(0), 0.1)
        with pytest.raises(UnknownIdError, match="7"):
            emb(np.array([1, 7]))
        with pytest.raises(UnknownIdError):
            emb(np.array([-1]))

    def test_lookup_is_pure(self):
        emb = Embedding(Params(), "emb.item", 5, 3, np.random.default_rng(0), 0.1)
        np.testing.assert_array_equal(emb(np.array([2, 2])).values[0], emb(np.array([2])).values[0])


class TestCTRModel:
    @pytest.mark.parametrize("variant", ["dnn", "attn", "trans_lite", "gpsvi"])
    def test_forward_is_finite(self, variant):
        model = CTRModel(VOCAB, ModelConfig(variant=variant, d=6), seed=0)
        p = model.predict(small_batch())
        assert p.shape == (6,) and np.isfinite(p).all() and ((p > 0) & (p < 1)).all()

    def test_gpsvi_trans_backbone(self):
        model = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6, backbone="trans_lite"), seed=0)
        assert np.isfinite(model.predict(small_batch())).all()

    def test_same_seed_same_parameters(self):
        a = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6), seed=3)
        b = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6), seed=3)
        for (ka, ta), (kb, tb) in zip(a.params.items(), b.params.items()):
            assert ka == kb
            np.testing.assert_array_equal(ta.values, tb.values)

    def test_gpsvi_contains_attention_parameters(self):
        attn = CTRModel(VOCAB, ModelConfig(variant="attn", d=6), seed=0)
        gp = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6), seed=0)
        assert set(attn.params) < set(gp.params)

    def test_group_prior_depends_only_on_group_and_item(self):
        model = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6), seed=0)
        g = model.group_prior(np.array([[1, 2], [1, 2], [1, 2]]), np.array([4, 4, 5])).g.values
        np.testing.assert_array_equal(g[0], g[1])
        assert not np.allclose(g[0], g[2])

    def test_group_prior_varies_with_item_over_inits(self):
        changed = 0
        for seed in range(20):
            model = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6), seed=seed)
            g = model.group_prior(np.array([[0, 0], [0, 0]]), np.array([1, 2])).g.values
            changed += not np.allclose(g[0], g[1], atol=1e-12)
        assert changed == 20

    def test_mean_path_is_deterministic(self):
        model = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6), seed=0)
        b = small_batch()
        np.testing.assert_array_equal(model.predict(b), model.predict(b))

    def test_mc_scoring_differs_from_mean_path(self):
        model = CTRModel(VOCAB, ModelConfig(variant="gpsvi", d=6), seed=0)
        b = small_batch()
        mc = model.predict(b, mc_samples=4, rng=np.random.default_rng(0))
        assert mc.shape == (6,) and not np.allclose(mc, model.predict(b))
