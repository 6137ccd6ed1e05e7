"""Pipeline: tokenization, projection, upsampling, the assembled model, accounting."""

import numpy as np
import pytest
from dataclasses import replace

import graphormer.autodiff as ad
from graphormer.autodiff import GradTape, Tensor, grad_check
from graphormer.config import ConfigError, desk_preset, paper_faithful_preset
from graphormer.encoder import grb_param_count
from graphormer.mesh import build_coarsening, generate_dataset
from graphormer.model import (
    GraphormerModel,
    TokenizerParams,
    count_params,
    count_params_from_config,
    flops_estimate,
    grb_param_delta,
    init_model_params,
    iter_param_specs,
    project_weak_perspective,
    tokenize,
    upsample_mesh,
)

from conftest import tiny_config


def make_tokenizer(rng, c, token_dim):
    return TokenizerParams(
        w1=Tensor(rng.standard_normal((c, token_dim)) * 0.1),
        b1=Tensor(np.zeros(token_dim)),
        w2=Tensor(rng.standard_normal((token_dim, token_dim)) * 0.1),
        b2=Tensor(np.zeros(token_dim)),
    )


class TestTokenize:
    def test_paper_faithful_shape(self, rng):
        c, c_g, token_dim = 1024, 2048, 2051
        grid = Tensor(rng.standard_normal((49, c)))
        global_row = Tensor(rng.standard_normal((1, c_g)))
        positions = Tensor(rng.standard_normal((14 + 431, 3)))
        ones = Tensor(np.ones((14 + 431, 1)))
        tokens = tokenize(grid, global_row, positions, make_tokenizer(rng, c, token_dim), ones)
        assert tokens.shape == (494, 2051)

    def test_identical_template_coords_identical_tokens(self, rng):
        positions = Tensor(np.array([[0.1, 0.2, 0.3], [0.1, 0.2, 0.3], [9.0, 9.0, 9.0]]))
        global_row = Tensor(rng.standard_normal((1, 5)))
        ones = Tensor(np.ones((3, 1)))
        tokens = tokenize(None, global_row, positions, None, ones)
        np.testing.assert_array_equal(tokens.data[0], tokens.data[1])
        assert np.abs(tokens.data[0] - tokens.data[2]).max() > 0

    def test_zero_global_vector(self, rng):
        positions = Tensor(rng.standard_normal((4, 3)))
        global_row = Tensor(np.zeros((1, 6)))
        ones = Tensor(np.ones((4, 1)))
        tokens = tokenize(None, global_row, positions, None, ones)
        np.testing.assert_array_equal(tokens.data[:, :6], np.zeros((4, 6)))
        np.testing.assert_array_equal(tokens.data[:, 6:], positions.data)

    def test_token_order_grid_then_queries(self, rng):
        c, token_dim = 4, 8
        grid = Tensor(rng.standard_normal((2, c)))
        global_row = Tensor(rng.standard_normal((1, 5)))
        positions = Tensor(rng.standard_normal((3, 3)))
        ones = Tensor(np.ones((3, 1)))
        tokens = tokenize(grid, global_row, positions, make_tokenizer(rng, c, token_dim), ones)
        assert tokens.shape == (5, 8)
        np.testing.assert_array_equal(tokens.data[2:, :5], np.tile(global_row.data, (3, 1)))


class TestUpsample:
    def test_geometric_init_semantics(self, tiny_cfg):
        model = GraphormerModel(tiny_cfg)
        down, up0 = build_coarsening(model.template)
        np.testing.assert_array_equal(model.params.upsampler.data, up0)
        coarse = down @ model.template.rest_vertices
        fine = upsample_mesh(Tensor(coarse), model.params.upsampler)
        # each fine vertex copies its ring centroid
        np.testing.assert_allclose(fine.data, coarse[model.template.coarse_index], atol=1e-12)

    def test_linearity(self, rng):
        u = Tensor(rng.standard_normal((8, 3)))
        a, b = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
        left = upsample_mesh(Tensor(2.0 * a + 3.0 * b), u).data
        right = 2.0 * upsample_mesh(Tensor(a), u).data + 3.0 * upsample_mesh(Tensor(b), u).data
        np.testing.assert_allclose(left, right, atol=1e-12)

    def test_gradient_through_upsampler(self, rng):
        u = ad.parameter(rng.standard_normal((6, 3)))
        coarse = Tensor(rng.standard_normal((3, 3)))
        target = Tensor(rng.standard_normal((6, 3)))
        report = grad_check(lambda: ad.l1_distance(upsample_mesh(coarse, u), target), {"u": u})
        assert report.max_rel_error < 1e-5


class TestWeakPerspective:
    def test_unit_scale_drops_z(self, rng):
        pts = rng.standard_normal((5, 3))
        out = project_weak_perspective(pts, 1.0, 0.0, 0.0)
        np.testing.assert_allclose(out.data, pts[:, :2], atol=1e-15)

    def test_origin_maps_to_translation(self):
        out = project_weak_perspective(np.zeros((1, 3)), 2.0, 0.3, -0.4)
        np.testing.assert_allclose(out.data, [[0.3, -0.4]], atol=1e-15)

    def test_scale_compensation_identity(self, rng):
        pts = rng.standard_normal((6, 3))
        k = 2.5
        base = project_weak_perspective(pts, 0.9, 0.1, 0.2).data
        compensated = project_weak_perspective(pts * k, 0.9 / k, 0.1, 0.2).data
        np.testing.assert_allclose(compensated, base, atol=1e-12)

    def test_camera_tensor_gradients(self, rng):
        pts = Tensor(rng.standard_normal((4, 3)))
        cam = ad.parameter(np.array([[1.1, 0.05, -0.02]]))
        target = Tensor(rng.standard_normal((4, 2)))
        report = grad_check(
            lambda: ad.l1_distance(project_weak_perspective(pts, cam), target), {"cam": cam}
        )
        assert report.max_rel_error < 1e-5


class TestModelForward:
    def test_deterministic_eval(self, tiny_cfg):
        model = GraphormerModel(tiny_cfg)
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        a = model.forward(sample.silhouette)
        b = model.forward(sample.silhouette)
        assert np.array_equal(a.fine_vertices.data, b.fine_vertices.data)
        assert np.array_equal(a.camera.data, b.camera.data)
        rebuilt = GraphormerModel(tiny_cfg)
        c = rebuilt.forward(sample.silhouette)
        assert np.array_equal(a.fine_vertices.data, c.fine_vertices.data)

    def test_empty_mask_identical_to_no_mask(self, tiny_cfg):
        model = GraphormerModel(tiny_cfg)
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        a = model.forward(
            sample.silhouette, training=True, mask_indices=np.empty(0, dtype=np.int64),
            rng=np.random.default_rng(7),
        )
        b = model.forward(
            sample.silhouette, training=True, mask_indices=None, rng=np.random.default_rng(7)
        )
        assert np.array_equal(a.fine_vertices.data, b.fine_vertices.data)
        assert np.array_equal(a.joints2d.data, b.joints2d.data)

    def test_masking_changes_output(self, tiny_cfg):
        model = GraphormerModel(tiny_cfg)
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        cfg = replace(tiny_cfg, model=replace(tiny_cfg.model, dropout=0.0))
        model = GraphormerModel(cfg)
        a = model.forward(sample.silhouette, training=True, mask_indices=np.array([0, 2]))
        b = model.forward(sample.silhouette, training=True)
        assert np.abs(a.coarse_vertices.data - b.coarse_vertices.data).max() > 0

    def test_desk_config_shapes(self):
        cfg = desk_preset()
        model = GraphormerModel(cfg)
        sample = generate_dataset(model.template, 1, 0.5, 0, 56)[0]
        out = model.forward(sample.silhouette)
        assert out.fine_vertices.shape == (192, 3)
        assert out.coarse_vertices.shape == (48, 3)
        assert out.joints3d.shape == (8, 3)
        assert out.joints2d.shape == (8, 2)
        assert out.camera.shape == (1, 3)
        assert out.attn.shape == (4, 105, 105)
        assert len(out.intermediate_coarse) == 3

    def test_joints2d_is_projection_of_joints3d(self, tiny_cfg):
        model = GraphormerModel(tiny_cfg)
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        out = model.forward(sample.silhouette)
        s, tx, ty = out.camera.data[0]
        expected = s * out.joints3d.data[:, :2] + np.array([tx, ty])
        np.testing.assert_allclose(out.joints2d.data, expected, atol=1e-12)

    def test_coarse_round_trip_at_geometric_init(self, tiny_cfg):
        model = GraphormerModel(tiny_cfg)
        down, _ = build_coarsening(model.template)
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        out = model.forward(sample.silhouette)
        np.testing.assert_allclose(down @ out.fine_vertices.data, out.coarse_vertices.data, atol=1e-10)

    def test_gradient_reaches_every_parameter_group(self, tiny_cfg):
        from graphormer.train import LossWeights, compute_losses

        model = GraphormerModel(tiny_cfg)
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        with GradTape() as tape:
            out = model.forward(sample.silhouette, training=True, rng=np.random.default_rng(3))
            total, _ = compute_losses(out, sample, LossWeights())
        tape.backward(total)
        dead = [n for n, t in model.named_parameters() if t.grad is None or not np.any(t.grad)]
        assert dead == []

    def test_grid_features_off(self, tiny_cfg):
        cfg = replace(tiny_cfg, model=replace(tiny_cfg.model, grid_features=False))
        model = GraphormerModel(cfg)
        assert model.params.tokenizer is None
        assert cfg.n_tokens == cfg.n_joints + cfg.n_coarse
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        out = model.forward(sample.silhouette)
        assert out.attn.shape[1] == cfg.n_joints + cfg.n_coarse

    def test_template_mismatch_rejected(self, tiny_cfg):
        from graphormer.mesh import generate_synthetic_template

        wrong = generate_synthetic_template(3, 1, 3, seed=0, coarse_target=9)
        with pytest.raises(ConfigError):
            GraphormerModel(tiny_cfg, template=wrong)


class TestAccounting:
    def test_count_matches_config_walk(self, tiny_cfg):
        model = GraphormerModel(tiny_cfg)
        by_params = count_params(model.params)
        by_config = count_params_from_config(tiny_cfg)
        assert by_params == by_config

    def test_single_linear_layer_formula(self, tiny_cfg):
        counts = count_params_from_config(tiny_cfg)
        d3 = tiny_cfg.model.hidden_dims[-1]
        assert counts["per_module"]["camera_head"] == d3 * 3 + 3

    def test_desk_delta_equals_closed_form(self):
        cfg = desk_preset()
        expected = cfg.model.blocks * grb_param_count(cfg.model.hidden_dims[2])
        assert grb_param_delta(cfg) == expected
        assert expected == 4 * 408

    def test_paper_faithful_table9_bounds(self):
        cfg = paper_faithful_preset()
        delta = grb_param_delta(cfg)
        assert 0 < delta <= 100_000  # "slight increase", bounded by 0.1M
        flops = flops_estimate(cfg)
        baseline = flops_estimate(
            replace(cfg, model=replace(cfg.model, grb_encoders=[])), nnz=None
        )
        rel = (flops["total"] - baseline["total"]) / baseline["total"]
        assert 0 < rel <= 0.001

    def test_grb_off_delta_zero(self, tiny_cfg):
        cfg = replace(tiny_cfg, model=replace(tiny_cfg.model, grb_encoders=[]))
        assert grb_param_delta(cfg) == 0

    def test_param_spec_names_unique_and_ordered(self, tiny_cfg):
        names = [name for name, _, _ in iter_param_specs(tiny_cfg)]
        assert len(names) == len(set(names))
        model = GraphormerModel(tiny_cfg)
        assert [n for n, _ in model.named_parameters()] == names

    def test_mlp_equivalent_within_five_percent(self, tiny_cfg):
        grb_cfg = tiny_cfg
        mlp_cfg = replace(tiny_cfg, model=replace(tiny_cfg.model, grb_kind="mlp_equivalent"))
        grb_delta = grb_param_delta(grb_cfg)
        mlp_delta = grb_param_delta(mlp_cfg)
        assert abs(mlp_delta - grb_delta) / grb_delta < 0.05


class TestInitialization:
    def test_seeded_init_reproducible(self, tiny_cfg):
        model_a = GraphormerModel(tiny_cfg)
        model_b = GraphormerModel(tiny_cfg)
        for (na, ta), (nb, tb) in zip(model_a.named_parameters(), model_b.named_parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)

    def test_different_seed_differs(self, tiny_cfg):
        a = init_model_params(tiny_cfg, GraphormerModel(tiny_cfg).template, seed=0)
        b = init_model_params(tiny_cfg, GraphormerModel(tiny_cfg).template, seed=1)
        assert np.abs(dict(a.named)["stack.enc1.w_q" if False else "stack.enc1.block0.w_q"].data
                      - dict(b.named)["stack.enc1.block0.w_q"].data).max() > 0

    def test_float32_selectable(self, tiny_cfg):
        cfg = replace(tiny_cfg, model=replace(tiny_cfg.model, precision="float32"))
        model = GraphormerModel(cfg)
        assert model.params.camera_w.data.dtype == np.float32
        sample = generate_dataset(model.template, 1, 0.5, 0, 16)[0]
        out = model.forward(sample.silhouette)
        assert out.fine_vertices.data.dtype == np.float32
