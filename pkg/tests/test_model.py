import numpy as np
import pytest

from lotshare import model, nn
from lotshare.errors import CheckpointFormatError, ConfigError, ShapeError
from lotshare.masking import TaskMask
from lotshare.model import (CrossKind, ModelConfig, SharingMode, Task,
                            cross_output_width, default_mlp_dims)


def small_config(n_fields=3, dim=4, hidden=(6, 4), mode=SharingMode.CONNECTION_SHARE,
                 cross=CrossKind.PAIRWISE_DOT, cards=None):
    cards = cards or (5,) * n_fields
    dims = (cross_output_width(len(cards), dim, cross), *hidden, 1)
    return ModelConfig(cards, dim, dims, cross, mode)


def random_ids(cfg, n, seed=0):
    rng = nn.make_rng(seed)
    return np.stack([rng.integers(0, c, n) for c in cfg.field_cardinalities], axis=1)


class TestConfig:
    def test_width_mismatch_rejected(self):
        with pytest.raises(ConfigError):
            ModelConfig((5, 5), 4, (99, 8, 1))

    def test_cross_widths(self):
        assert cross_output_width(3, 4, CrossKind.NONE) == 12
        assert cross_output_width(3, 4, CrossKind.PAIRWISE_DOT) == 15
        assert cross_output_width(3, 4, CrossKind.PAIRWISE_PRODUCT) == 24

    def test_json_round_trip(self):
        cfg = small_config()
        assert ModelConfig.from_json_dict(cfg.to_json_dict()) == cfg


class TestEmbed:
    def test_zero_row_lookup(self):
        cfg = small_config()
        p = model.init_params(cfg, 1)
        p.embeddings[1][2, :] = 0.0
        ids = np.array([[0, 2, 0]])
        emb = model.embed(ids, p.embeddings)
        assert (emb[0, 1] == 0).all()

    def test_equal_ids_equal_embeddings(self):
        cfg = small_config()
        p = model.init_params(cfg, 1)
        ids = np.array([[1, 2, 3], [1, 2, 3]])
        emb = model.embed(ids, p.embeddings)
        assert (emb[0] == emb[1]).all()

    def test_out_of_range_names_field_and_id(self):
        cfg = small_config()
        p = model.init_params(cfg, 1)
        with pytest.raises(IndexError, match=r"id 9.*field 2"):
            model.embed(np.array([[0, 0, 9]]), p.embeddings)


class TestFeatureCross:
    def test_single_field_no_pairs(self):
        emb = nn.make_rng(0).standard_normal((2, 1, 4))
        for kind in CrossKind:
            out = model.feature_cross(emb, kind)
            assert (out == emb.reshape(2, 4)).all()

    def test_orthogonal_dot(self):
        emb = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        out = model.feature_cross(emb, CrossKind.PAIRWISE_DOT)
        assert (out == np.array([[1.0, 0.0, 0.0, 1.0, 0.0]])).all()

    def test_pairwise_product_width(self):
        emb = nn.make_rng(1).standard_normal((5, 3, 4))
        out = model.feature_cross(emb, CrossKind.PAIRWISE_PRODUCT)
        assert out.shape == (5, 24)  # 3*4 flat + C(3,2)=3 pairs of width 4


class TestForward:
    def test_all_ones_mask_bit_identical(self):
        cfg = small_config()
        p = model.init_params(cfg, 2)
        ids = random_ids(cfg, 10, 3)
        mask = TaskMask.all_ones(p.mlp_weights, Task.CTR)
        assert (model.forward(ids, p, cfg, Task.CTR, mask=mask)
                == model.forward(ids, p, cfg, Task.CTR)).all()

    def test_zero_final_layer_gives_half(self):
        cfg = small_config()
        p = model.init_params(cfg, 2)
        mask = TaskMask.all_ones(p.mlp_weights, Task.CTR)
        mask.layers[-1][:] = 0.0
        preds = model.forward(random_ids(cfg, 7, 1), p, cfg, Task.CTR, mask=mask)
        assert (preds == 0.5).all()

    def test_masked_equals_weight_zeroing_oracle(self):
        cfg = small_config()
        p = model.init_params(cfg, 5)
        rng = nn.make_rng(6)
        mask = TaskMask([(rng.random(w.shape) < 0.6).astype(float)
                         for w in p.mlp_weights], Task.CVR)
        ids = random_ids(cfg, 20, 7)
        masked = model.forward(ids, p, cfg, Task.CVR, mask=mask)
        zeroed = p.copy()
        zeroed.mlp_weights = [w * m for w, m in zip(p.mlp_weights, mask.layers)]
        oracle = model.forward(ids, zeroed, cfg, Task.CVR)
        assert (masked == oracle).all()

    def test_predictions_open_interval(self):
        cfg = small_config()
        p = model.init_params(cfg, 8)
        p.mlp_biases[-1][:] = 100.0  # saturate
        preds = model.forward(random_ids(cfg, 5, 0), p, cfg, Task.CTR)
        assert ((preds > 0) & (preds < 1)).all()

    def test_mask_rejected_in_single_task(self):
        cfg = small_config(mode=SharingMode.SINGLE_TASK)
        p = model.init_params(cfg, 0)
        mask = TaskMask.all_ones(p.mlp_weights, Task.CTR)
        with pytest.raises(ConfigError):
            model.forward(random_ids(cfg, 2, 0), p, cfg, Task.CTR, mask=mask)

    def test_mask_shape_mismatch(self):
        cfg = small_config()
        p = model.init_params(cfg, 0)
        mask = TaskMask([np.ones((2, 2)) for _ in p.mlp_weights], Task.CTR)
        with pytest.raises(ShapeError):
            model.forward(random_ids(cfg, 2, 0), p, cfg, Task.CTR, mask=mask)


class TestLayerShare:
    def test_cvr_tower_perturbation_leaves_ctr(self):
        cfg = small_config(hidden=(8, 6, 4), mode=SharingMode.LAYER_SHARE)
        p = model.init_params(cfg, 3)
        ids = random_ids(cfg, 10, 4)
        before = model.forward(ids, p, cfg, Task.CTR)
        for w in p.head_weights[Task.CVR]:
            w += 10.0
        after = model.forward(ids, p, cfg, Task.CTR)
        assert (before == after).all()
        assert not (model.forward(ids, p, cfg, Task.CVR)
                    == model.forward(ids, p, cfg, Task.CTR)).all()


from gradcheck import analytic_grads, finite_diff_check, loss_of  # noqa: E402


class TestGradients:
    def test_single_affine_mse_closed_form(self):
        cards = (3,)
        cfg = ModelConfig(cards, 2, (2, 1), CrossKind.NONE, SharingMode.CONNECTION_SHARE)
        p = model.init_params(cfg, 0)
        ids = np.array([[1]])
        y = np.array([0.25])
        preds, cache = model.forward(ids, p, cfg, Task.CVR, want_cache=True)
        dlogit = 2 * (preds - y) * preds * (1 - preds)
        grads = model.backward(dlogit, cache, p, cfg)
        expected = 2 * (preds[0] - y[0]) * preds[0] * (1 - preds[0]) * cache.cross[0]
        np.testing.assert_allclose(grads.mlp_weights[0][:, 0], expected, rtol=1e-12)

    @pytest.mark.parametrize("task", [Task.CTR, Task.CVR])
    @pytest.mark.parametrize("cross", [CrossKind.NONE, CrossKind.PAIRWISE_DOT,
                                       CrossKind.PAIRWISE_PRODUCT])
    def test_finite_difference(self, task, cross):
        cfg = small_config(n_fields=3, dim=3, hidden=(5, 3), cross=cross,
                           cards=(4, 3, 5))
        assert finite_diff_check(cfg, task, seed=11) < 1e-3

    def test_finite_difference_layer_share(self):
        cfg = small_config(n_fields=3, dim=3, hidden=(5, 4, 3), cross=CrossKind.PAIRWISE_DOT,
                           cards=(4, 3, 5), mode=SharingMode.LAYER_SHARE)
        assert finite_diff_check(cfg, Task.CTR, seed=12) < 1e-3

    def test_finite_difference_masked(self):
        cfg = small_config(n_fields=3, dim=3, hidden=(5, 3), cards=(4, 3, 5))
        p = model.init_params(cfg, 13)
        rng = nn.make_rng(14)
        mask = TaskMask([(rng.random(w.shape) < 0.7).astype(float)
                         for w in p.mlp_weights], Task.CTR)
        assert finite_diff_check(cfg, Task.CTR, seed=13, mask=mask) < 1e-3

    def test_relu_dead_unit_zero_gradient(self):
        cfg = small_config(n_fields=2, dim=2, hidden=(3,), cards=(3, 3))
        p = model.init_params(cfg, 4)
        ids = np.array([[1, 2]])
        _, cache = model.forward(ids, p, cfg, Task.CVR, want_cache=True)
        dead = cache.pre_activations[0][0] < 0
        assert dead.any(), "pick a seed with a dead unit"
        grads = analytic_grads(p, cfg, Task.CVR, ids, np.array([0.9]))
        assert (grads.mlp_weights[0][:, dead] == 0).all()

    def test_embedding_row_gradient_single_touch(self):
        cfg = small_config(n_fields=2, dim=3, hidden=(4,), cards=(5, 5))
        p = model.init_params(cfg, 7)
        ids = np.array([[2, 1], [3, 1]])  # field-0 row 2 touched by sample 0 only
        labels = np.array([0.2, 0.8])
        grads = analytic_grads(p, cfg, Task.CVR, ids, labels)
        h = 1e-6
        num = np.zeros(3)
        for j in range(3):
            orig = p.embeddings[0][2, j]
            p.embeddings[0][2, j] = orig + h
            lp = loss_of(p, cfg, Task.CVR, ids, labels)
            p.embeddings[0][2, j] = orig - h
            lm = loss_of(p, cfg, Task.CVR, ids, labels)
            p.embeddings[0][2, j] = orig
            num[j] = (lp - lm) / (2 * h)
        np.testing.assert_allclose(grads.embeddings[0][2], num, rtol=1e-4, atol=1e-10)
        assert (grads.embeddings[0][4] == 0).all()  # untouched row


class TestSnapshot:
    def test_snapshot_and_rewind(self):
        cfg = small_config()
        p = model.init_params(cfg, 5)
        p.take_snapshot()
        blocks_before = [b.copy() for b in p.blocks()]
        for b in p.blocks():
            b += 1.0
        p.rewind()
        for b, ref in zip(p.blocks(), blocks_before):
            assert (b == ref).all()


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        cfg = small_config(hidden=(6, 4))
        p = model.init_params(cfg, 9)
        f1, f2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        model.save_checkpoint(f1, p, cfg)
        cfg2, p2 = model.load_checkpoint(f1)
        assert cfg2 == cfg
        for a, b in zip(p.blocks(), p2.blocks()):
            assert (a == b).all()
        model.save_checkpoint(f2, p2, cfg2)
        assert f1.read_bytes() == f2.read_bytes()

    def test_truncated_rejected(self, tmp_path):
        cfg = small_config()
        p = model.init_params(cfg, 9)
        f = tmp_path / "a.ckpt"
        model.save_checkpoint(f, p, cfg)
        f.write_bytes(f.read_bytes()[:-10])
        with pytest.raises(CheckpointFormatError):
            model.load_checkpoint(f)

    def test_bad_magic(self, tmp_path):
        f = tmp_path / "junk.ckpt"
        f.write_bytes(b"nope" + b"\x00" * 100)
        with pytest.raises(CheckpointFormatError):
            model.load_checkpoint(f)
