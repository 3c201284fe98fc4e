"""Coordinate quantization, layout tuples, and the four input streams."""

import numpy as np
import pytest

from kvgen import ops
from kvgen.embeddings import (VisualConfig, assemble_streams, backbone_forward,
                              embed_layouts, visual_features)
from kvgen.gradcheck import grad_check
from kvgen.layout import (LayoutTuple, normalize_box, source_layout, special_layout,
                          target_grid_layout)
from kvgen.model import KVGenModel, ModelConfig
from kvgen.tensor import ShapeError, Tensor, backward


class TestNormalizeBox:
    def test_basic_quantization(self):
        assert normalize_box((512, 0, 512, 0), 1024, 100)[0] == 500

    def test_range_endpoints(self):
        q = normalize_box((0, 0, 1024, 768), 1024, 768)
        assert q == (0, 0, 1000, 1000)

    def test_idempotent_at_scale(self):
        q = normalize_box((137, 42, 888, 900), 1000, 1000)
        assert normalize_box(q, 1000, 1000) == q

    def test_zero_page_dimension(self):
        with pytest.raises(ValueError, match="page dimensions"):
            normalize_box((0, 0, 1, 1), 0, 10)


class TestSourceLayout:
    def test_three_way_slicing(self):
        qbox = (100, 10, 400, 50)
        tuples = [source_layout(qbox, k, 3) for k in range(3)]
        assert [t.x for t in tuples] == [(100, 200, 100), (200, 300, 100), (300, 400, 100)]

    def test_single_token_inherits_box(self):
        t = source_layout((100, 10, 400, 50), 0, 1)
        assert t.x == (100, 400, 300) and t.y == (10, 50, 40)

    def test_all_tokens_share_y(self):
        tuples = [source_layout((0, 7, 90, 30), k, 4) for k in range(4)]
        assert len({t.y for t in tuples}) == 1

    def test_shared_box_mode(self):
        t = source_layout((100, 10, 400, 50), 2, 3, shared_box=True)
        assert t.x == (100, 400, 100)


class TestSpecialAndGridLayout:
    def test_pad_is_empty_box(self):
        assert special_layout(True) == LayoutTuple(x=(0, 0, 0), y=(0, 0, 0))

    def test_sep_gets_page_extent(self):
        assert special_layout(False, 1000, 1000) == LayoutTuple(x=(0, 1000, 1000),
                                                                y=(0, 1000, 1000))

    def test_grid_origin(self):
        assert target_grid_layout(0, 64, 64) == LayoutTuple(x=(0, 1, 1), y=(0, 1, 1))

    def test_grid_row_first(self):
        assert target_grid_layout(64, 64, 64) == LayoutTuple(x=(0, 1, 1), y=(1, 2, 1))
        assert target_grid_layout(65, 64, 64) == LayoutTuple(x=(1, 2, 1), y=(1, 2, 1))

    def test_grid_overflow(self):
        with pytest.raises(ValueError, match="grid"):
            target_grid_layout(16, 4, 4)


class TestEmbedLayouts:
    def test_repeated_index_triples_row(self):
        table = Tensor(np.random.default_rng(0).standard_normal((5, 3)))
        ex, _ = embed_layouts([LayoutTuple(x=(0, 0, 0), y=(1, 2, 1))], table, table)
        np.testing.assert_allclose(ex.data[0], 3 * table.data[0], rtol=1e-15)

    def test_equal_tuples_equal_embeddings(self):
        table = Tensor(np.random.default_rng(1).standard_normal((10, 4)))
        t = LayoutTuple(x=(2, 5, 3), y=(1, 4, 3))
        ex, ey = embed_layouts([t, t], table, table)
        np.testing.assert_array_equal(ex.data[0], ex.data[1])
        np.testing.assert_array_equal(ey.data[0], ey.data[1])

    def test_gradient_hits_only_looked_up_rows(self):
        table = Tensor(np.random.default_rng(2).standard_normal((8, 3)), requires_grad=True)
        ex, _ = embed_layouts([LayoutTuple(x=(1, 4, 3), y=(0, 0, 0))], table,
                              Tensor(np.zeros((8, 3))))
        backward(ops.sum_(ex))
        touched = {1, 3, 4}
        for row in range(8):
            if row in touched:
                assert np.any(table.grad[row] != 0)
            else:
                assert np.all(table.grad[row] == 0)

    def test_gradient_matches_finite_differences(self):
        layouts = [LayoutTuple(x=(1, 4, 3), y=(2, 6, 4)),
                   LayoutTuple(x=(0, 2, 2), y=(2, 2, 0))]
        ytab = Tensor(np.random.default_rng(3).standard_normal((8, 3)))

        def f(t):
            ex, ey = embed_layouts(layouts, t, ytab)
            return ops.sum_(ops.mul(ex, ex))

        err = grad_check(f, Tensor(np.random.default_rng(4).standard_normal((8, 3))))
        assert err <= 1e-6


class TestVisualFeatures:
    cfg = VisualConfig(image_side=32, channels=(4, 6, 8), down_scale=4)

    def params(self, seed=0):
        model_cfg = ModelConfig(vocab_size=10, d_h=16, n_heads=2, visual_enabled=True,
                                visual=self.cfg, max_src_len=8, max_tgt_len=8,
                                grid_w=8, grid_h=8)
        return KVGenModel.init(model_cfg, seed).params

    def test_constant_image_gives_equal_roi_vectors(self):
        p = self.params()
        fmap = backbone_forward(p, np.full((32, 32), 0.7), self.cfg)
        layouts = [LayoutTuple(x=(0, 1000, 1000), y=(0, 1000, 1000)),
                   LayoutTuple(x=(100, 300, 100), y=(50, 120, 70)),
                   LayoutTuple(x=(700, 950, 250), y=(800, 900, 100))]
        out = visual_features(fmap, layouts, [True] * 3, p["vis.proj.w"],
                              p["vis.proj.b"], p["embed.null_vis"], 1000, 2)
        np.testing.assert_allclose(out.data[0], out.data[1], atol=1e-10)
        np.testing.assert_allclose(out.data[0], out.data[2], atol=1e-10)

    def test_null_rows_use_learned_vector(self):
        p = self.params()
        fmap = backbone_forward(p, np.random.default_rng(1).random((32, 32)), self.cfg)
        layouts = [LayoutTuple(x=(0, 0, 0), y=(0, 0, 0))] * 2
        out = visual_features(fmap, layouts, [False, False], p["vis.proj.w"],
                              p["vis.proj.b"], p["embed.null_vis"], 1000, 2)
        np.testing.assert_array_equal(out.data[0], p["embed.null_vis"].data)
        np.testing.assert_array_equal(out.data[1], p["embed.null_vis"].data)


class TestAssembleStreams:
    def model(self, **kw):
        cfg = ModelConfig(vocab_size=12, d_h=16, n_heads=2, max_src_len=16,
                          max_tgt_len=8, grid_w=8, grid_h=8, **kw)
        return KVGenModel.init(cfg, 0)

    def test_zero_inputs_give_zero_streams(self):
        m = self.model()
        for key in ("embed.token", "embed.x", "embed.y"):
            m.params[key].data[:] = 0.0
        layouts = [LayoutTuple(x=(1, 2, 1), y=(3, 4, 1))] * 3
        s = assemble_streams(m.params, [1, 2, 3], layouts, None)
        for t in (s.sem, s.x, s.y, s.vis):
            np.testing.assert_array_equal(t.data, 0.0)

    def test_permuting_tokens_permutes_streams(self):
        m = self.model()
        layouts = [LayoutTuple(x=(i, i + 2, 2), y=(i, i + 1, 1)) for i in range(4)]
        ids = [3, 1, 7, 2]
        s = assemble_streams(m.params, ids, layouts, None)
        perm = [2, 0, 3, 1]
        sp = assemble_streams(m.params, [ids[i] for i in perm],
                              [layouts[i] for i in perm], None)
        for a, b in ((s.sem, sp.sem), (s.x, sp.x), (s.y, sp.y)):
            np.testing.assert_array_equal(a.data[perm], b.data)

    def test_length_mismatch_rejected(self):
        m = self.model()
        with pytest.raises(ShapeError, match="lengths"):
            assemble_streams(m.params, [1, 2], [LayoutTuple(x=(0, 1, 1), y=(0, 1, 1))], None)

    def test_width_mismatch_rejected_at_config(self):
        with pytest.raises(ValueError, match="tie_head"):
            ModelConfig(vocab_size=10, d_h=16, n_heads=2, d_s=8)
