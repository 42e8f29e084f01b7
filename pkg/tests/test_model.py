import copy

import numpy as np
import pytest

from conftest import TINY, kink_free_model, model_gradient_errors, tiny_envs, tiny_examples
from popattn import tensor as T
from popattn.errors import CompatibilityError, InvalidInputError
from popattn.model import (
    ABLATION_VARIANTS,
    VARIANTS,
    DualAttentionModel,
    ModelConfig,
    load_model,
    make_batch,
    save_model,
)
from popattn.tensor import Tensor, no_grad


def build(variant="dual", seed=0, **overrides):
    cfg = ModelConfig.for_variant(variant, **{**TINY, **overrides})
    return DualAttentionModel(cfg, seed=seed)


def zero_all(model):
    for p in model.parameters():
        p.data[...] = 0


@pytest.fixture
def batch(rng):
    cfg = ModelConfig.for_variant("dual", **TINY)
    return make_batch(tiny_examples(rng), tiny_envs(rng), cfg)


class TestConfig:
    def test_variant_round_trip(self):
        for name in VARIANTS:
            assert ModelConfig.for_variant(name, **TINY).variant == name

    def test_ablation_lattice_has_six_members(self):
        assert len(ABLATION_VARIANTS) == 6
        assert set(ABLATION_VARIANTS) <= set(VARIANTS)

    def test_rejects_bad_dims(self):
        with pytest.raises(InvalidInputError):
            ModelConfig.for_variant("dual", **{**TINY, "d2": 0})

    def test_unknown_variant(self):
        with pytest.raises(InvalidInputError):
            ModelConfig.for_variant("ccr", **TINY)


class TestEncoder:
    def test_zero_weights_give_zero_states(self, batch):
        m = build()
        zero_all(m)
        q = m.encode_caption(batch.token_ids, batch.mask)
        assert q.shape == (len(batch), batch.token_ids.shape[1], TINY["d2"])
        assert np.all(q.data == 0)

    @pytest.mark.parametrize("length", [1, 2, 5])
    def test_output_shape(self, length):
        m = build()
        ids = np.full((2, length), 3)
        assert m.encode_caption(ids, ids != 0).shape == (2, length, TINY["d2"])

    def test_too_long(self):
        m = build(t_max=4)
        ids = np.full((1, 5), 3)
        with pytest.raises(InvalidInputError):
            m.encode_caption(ids, ids != 0)

    def test_grad(self, batch):
        m = build().astype(np.float64)
        w = np.random.default_rng(7).normal(size=(len(batch), batch.token_ids.shape[1], TINY["d2"]))

        def loss():
            return T.sum(m.encode_caption(batch.token_ids, batch.mask) * Tensor(w))

        m.zero_grad()
        T.backward(loss())
        for p in (m.embedding, m.lstm.w_input, m.lstm.w_hidden, m.lstm.bias):
            analytic = p.grad.copy()

            def fn():
                with no_grad():
                    return float(loss().data)

            assert T.relative_error(analytic, T.numerical_gradient(fn, p.data)) < 1e-4


class TestExplicitAttention:
    def _inputs(self, rng, m, B=3, Tn=4):
        image = Tensor(rng.normal(size=(B, TINY["d1"])).astype(np.float32))
        q = Tensor(rng.normal(size=(B, Tn, TINY["d2"])).astype(np.float32))
        mask = np.ones((B, Tn), dtype=bool)
        if B > 1:
            mask[1, 2:] = False
        return image, q, mask

    def test_weights_are_probabilities(self, rng):
        m = build()
        image, q, mask = self._inputs(rng, m)
        _, _, a = m.explicit_attention(image, q, mask)
        assert np.all(a.data >= 0)
        assert np.all(a.data[~mask] == 0)
        np.testing.assert_allclose(a.data.sum(axis=1), 1.0, atol=1e-6)

    def test_zero_affinity_removes_image_dependence(self, rng):
        m = build()
        for p in m.W_a.parameters():
            p.data[...] = 0
        image, q, mask = self._inputs(rng, m)
        _, _, a1 = m.explicit_attention(image, q, mask)
        other = Tensor(rng.normal(size=image.shape).astype(np.float32))
        _, _, a2 = m.explicit_attention(other, q, mask)
        assert a1.data.tobytes() == a2.data.tobytes()

    def test_image_branch_zeroed_attention_depends_on_caption_only(self, rng):
        m = build()
        for layer in (m.W_a, m.W_v):
            for p in layer.parameters():
                p.data[...] = 0
        image, q, mask = self._inputs(rng, m)
        _, _, a1 = m.explicit_attention(image, q, mask)
        _, _, a2 = m.explicit_attention(Tensor(image.data * 3.0 + 1.0), q, mask)
        assert a1.data.tobytes() == a2.data.tobytes()

    def test_single_word(self, rng):
        m = build()
        image, q, mask = self._inputs(rng, m, Tn=1)
        _, _, a = m.explicit_attention(image, q, mask)
        assert np.all(a.data == 1.0)

    def test_row_permutation(self, rng):
        m = build()
        image, q, mask = self._inputs(rng, m, B=1, Tn=5)
        perm = np.array([3, 0, 4, 1, 2])
        _, qh1, a1 = m.explicit_attention(image, q, mask)
        _, qh2, a2 = m.explicit_attention(image, Tensor(q.data[:, perm]), mask[:, perm])
        np.testing.assert_allclose(a2.data, a1.data[:, perm], rtol=1e-5, atol=1e-7)
        np.testing.assert_allclose(qh2.data, qh1.data, rtol=1e-5, atol=1e-6)

    def test_all_masked_caption(self, rng):
        m = build()
        image, q, mask = self._inputs(rng, m)
        mask[0] = False
        with pytest.raises(InvalidInputError):
            m.explicit_attention(image, q, mask)


class TestImplicitAttention:
    def test_zero_environment(self):
        m = build()
        z_img = Tensor(np.zeros((2, TINY["d1"]), dtype=np.float32))
        z_top = Tensor(np.zeros((2, TINY["topics"]), dtype=np.float32))
        assert np.all(m.implicit_mapping(z_img, z_top).data == 0)
        assert np.all(m.implicit_attention(z_img, z_top).data == 0)

    def test_gate_kill_leaves_shortcut(self, rng):
        m = build()
        for layer in (m.W_i, m.W_t):
            for p in layer.parameters():
                p.data[...] = 0
        ie = rng.normal(size=(2, TINY["d1"])).astype(np.float32)
        te = rng.dirichlet(np.ones(TINY["topics"]), size=2).astype(np.float32)
        h = m.implicit_mapping(Tensor(ie), Tensor(te)).data
        expected = ie @ m.W_i2.weight.data.T + m.W_i2.bias.data + te @ m.W_t2.weight.data.T + m.W_t2.bias.data
        np.testing.assert_allclose(h, expected, rtol=1e-5, atol=1e-6)

    def test_grad(self, rng):
        m = build().astype(np.float64)
        ie = Tensor(rng.normal(size=(3, TINY["d1"])))
        te = Tensor(rng.dirichlet(np.ones(TINY["topics"]), size=3))
        w = rng.normal(size=(3, TINY["d_env"]))

        def loss():
            return T.sum(m.implicit_attention(ie, te) * Tensor(w))

        m.zero_grad()
        T.backward(loss())
        for layer in (m.W_i, m.W_t, m.W_i2, m.W_t2, m.env_out):
            for p in layer.parameters():
                analytic = p.grad.copy()

                def fn():
                    with no_grad():
                        return float(loss().data)

                assert T.relative_error(analytic, T.numerical_gradient(fn, p.data)) < 1e-4


class TestFusion:
    def test_zero_weights_half(self, rng):
        m = build()
        zero_all(m)
        d2 = TINY["d2"]
        v = Tensor(rng.normal(size=(3, d2)).astype(np.float32))
        e = Tensor(rng.normal(size=(3, TINY["d_env"])).astype(np.float32))
        assert np.all(m.fuse_and_classify(v, v, e).data == 0.5)

    def test_range_and_negation(self, rng):
        m = build()
        v = Tensor(rng.normal(size=(50, TINY["d2"])).astype(np.float32))
        q = Tensor(rng.normal(size=(50, TINY["d2"])).astype(np.float32))
        e = Tensor(np.abs(rng.normal(size=(50, TINY["d_env"]))).astype(np.float32))
        p = m.fuse_and_classify(v, q, e).data
        assert np.all((p > 0) & (p < 1))
        for prm in m.head.out.parameters():
            prm.data *= -1
        np.testing.assert_allclose(m.fuse_and_classify(v, q, e).data, 1 - p, atol=1e-6)

    def test_shape_mismatch(self, rng):
        from popattn.errors import ShapeError

        m = build()
        with pytest.raises(ShapeError):
            m.fuse_and_classify(Tensor(np.zeros((2, 6))), Tensor(np.zeros((2, 5))), None)


class TestForward:
    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_zero_weights_give_half(self, variant, rng):
        m = build(variant)
        zero_all(m)
        b = make_batch(tiny_examples(rng), tiny_envs(rng), m.cfg)
        np.testing.assert_array_equal(m.predict_proba(b), 0.5)

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_output_strictly_inside_unit_interval(self, variant, rng):
        m = build(variant)
        b = make_batch(tiny_examples(rng, n=20), tiny_envs(rng), m.cfg)
        p = m.predict_proba(b)
        assert np.all((p > 0) & (p < 1))
        assert np.isfinite(m.loss(b).item())

    def test_late_fusion_is_mean_of_branches(self, rng):
        m = build("late")
        b = make_batch(tiny_examples(rng), None, m.cfg)
        with no_grad():
            image = Tensor(b.image)
            p_v = m.head_visual(m.project_image(image)).data
            p_t = m.head_textual(m._mean_pool(m.encode_caption(b.token_ids, b.mask), b.mask)).data
        np.testing.assert_allclose(m.predict_proba(b), (p_v + p_t) / 2, rtol=1e-6)

    def test_empty_caption_becomes_unk(self, rng):
        m = build()
        ex = tiny_examples(rng, n=2)
        ex[0].token_ids = []
        b = make_batch(ex, tiny_envs(rng), m.cfg)
        assert b.token_ids[0, 0] == 1 and b.mask[0].sum() == 1
        assert np.all(np.isfinite(m.predict_proba(b)))

    def test_attention_exposed_only_with_explicit_attention(self, batch):
        assert build("dual").forward(batch).attention is not None
        assert build("env").forward(batch).attention is None

    def test_deterministic_init(self, batch):
        a, b = build(seed=3), build(seed=3)
        assert all(x.data.tobytes() == y.data.tobytes() for x, y in zip(a.parameters(), b.parameters()))
        assert a.loss(batch).data.tobytes() == b.loss(batch).data.tobytes()


class TestEndToEndGradients:
    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_float64(self, variant, batch):
        m = kink_free_model(lambda s: build(variant, seed=s), batch).astype(np.float64)
        errors = model_gradient_errors(m, batch)
        assert max(errors.values()) < 1e-4, errors

    @pytest.mark.parametrize("variant", ["dual", "early", "late"])
    def test_float32(self, variant, batch):
        # explicit.W_h.bias has an exactly-zero gradient; the floor keeps
        # float32 round-off on it from reading as a relative error
        m = kink_free_model(lambda s: build(variant, seed=s), batch)
        errors = model_gradient_errors(m, batch, floor=1e-6)
        assert max(errors.values()) < 1e-2, errors

    def test_replay_is_bitwise_deterministic(self, batch):
        grads = []
        for _ in range(2):
            m = build(seed=5)
            T.backward(m.loss(batch))
            grads.append(b"".join(p.grad.tobytes() for p in m.parameters()))
        assert grads[0] == grads[1]


class TestPersistence:
    def test_round_trip(self, tmp_path, batch):
        m = build(seed=2)
        save_model(tmp_path / "ckpt", tmp_path / "manifest.json", m, vocab_hash="v", lda_hash="l")
        back = load_model(tmp_path / "ckpt", tmp_path / "manifest.json", vocab_hash="v", lda_hash="l")
        assert back.cfg == m.cfg
        np.testing.assert_array_equal(back.predict_proba(batch), m.predict_proba(batch))

    def test_hash_mismatch_rejected(self, tmp_path):
        m = build()
        save_model(tmp_path / "ckpt", tmp_path / "manifest.json", m, vocab_hash="v", lda_hash="l")
        with pytest.raises(CompatibilityError):
            load_model(tmp_path / "ckpt", tmp_path / "manifest.json", vocab_hash="other")

    def test_shape_mismatch_rejected(self):
        m = build()
        other = build(d_fuse=9)
        with pytest.raises(CompatibilityError):
            m.load_state_dict(other.state_dict())

    def test_deepcopy_is_independent(self):
        m = build()
        c = copy.deepcopy(m)
        c.parameters()[0].data += 1
        assert not np.array_equal(c.parameters()[0].data, m.parameters()[0].data)
