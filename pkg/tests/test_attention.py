"""Masks, modal scores, fusion, and the full attention block."""

import numpy as np
import pytest

from kvgen.attention import build_mask, fuse_and_attend, fused_layer, modal_score
from kvgen.embeddings import MODALITIES, ModalStreams
from kvgen.gradcheck import grad_check
from kvgen.tensor import ShapeError, Tensor, backward, no_grad

NEG = -np.inf


def random_params(rng, d_h, ff=None, zero_ff=False):
    ff = ff or 4 * d_h
    out = {}
    for m in MODALITIES:
        p = {}
        for k in ("wq", "wk", "wv", "wo"):
            p[k] = Tensor(rng.standard_normal((d_h, d_h)) * 0.3, requires_grad=True)
        p["ff1_w"] = Tensor(np.zeros((d_h, ff)) if zero_ff
                            else rng.standard_normal((d_h, ff)) * 0.3, requires_grad=True)
        p["ff1_b"] = Tensor(np.zeros(ff), requires_grad=True)
        p["ff2_w"] = Tensor(np.zeros((ff, d_h)) if zero_ff
                            else rng.standard_normal((ff, d_h)) * 0.3, requires_grad=True)
        p["ff2_b"] = Tensor(np.zeros(d_h), requires_grad=True)
        for i in (1, 2):
            p[f"ln{i}_g"] = Tensor(np.ones(d_h), requires_grad=True)
            p[f"ln{i}_b"] = Tensor(np.zeros(d_h), requires_grad=True)
        out[m] = p
    return out


def random_streams(rng, n, d_h):
    return ModalStreams(**{m: Tensor(rng.standard_normal((n, d_h))) for m in MODALITIES})


class TestBuildMask:
    def test_bidirectional_all_zero(self):
        m = build_mask("bidirectional", 3).matrix
        np.testing.assert_array_equal(m, np.zeros((3, 3)))

    def test_unidirectional_causal(self):
        m = build_mask("unidirectional", 3).matrix
        expect = np.array([[0, NEG, NEG], [0, 0, NEG], [0, 0, 0]])
        np.testing.assert_array_equal(m, expect)

    def test_unidirectional_custom_order(self):
        # position 0 is ranked last: it sees everyone, nobody else sees it
        m = build_mask("unidirectional", 3, uni_order=[2, 0, 1]).matrix
        np.testing.assert_array_equal(m[0], [0, 0, 0])
        np.testing.assert_array_equal(m[:, 0], [0, NEG, NEG])

    def test_seq2seq_first_target_row(self):
        m = build_mask("seq2seq", 2, 2).matrix
        np.testing.assert_array_equal(m[2], [0, 0, 0, NEG])
        np.testing.assert_array_equal(m[0], [0, 0, NEG, NEG])
        np.testing.assert_array_equal(m[3], [0, 0, 0, 0])

    def test_ner_matches_seq2seq_access_rule(self):
        np.testing.assert_array_equal(build_mask("ner", 3, 2).matrix,
                                      build_mask("seq2seq", 3, 2).matrix)

    def test_pad_columns_blocked_everywhere(self):
        m = build_mask("seq2seq", 4, 2, pad_positions=[2, 3]).matrix
        assert np.isneginf(m[:, 2]).all() and np.isneginf(m[:, 3]).all()

    def test_zero_lengths_rejected(self):
        with pytest.raises(ValueError, match="zero"):
            build_mask("bidirectional", 0, 0)

    def test_fully_masked_row_rejected(self):
        with pytest.raises(ValueError, match="attendable"):
            build_mask("bidirectional", 2, pad_positions=[0, 1])


class TestModalScore:
    def test_zero_streams_zero_scores(self):
        rng = np.random.default_rng(0)
        wq = Tensor(rng.standard_normal((8, 8)))
        wk = Tensor(rng.standard_normal((8, 8)))
        s = modal_score(Tensor(np.zeros((5, 8))), wq, wk, head=0, n_heads=2)
        np.testing.assert_array_equal(s.data, 0.0)

    def test_fourth_root_divisor(self):
        # d_h=32, 2 heads -> d_k=16, divisor 2 under the fourth-root rule
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((3, 32)))
        wq = Tensor(np.eye(32))
        wk = Tensor(np.eye(32))
        s4 = modal_score(x, wq, wk, head=0, n_heads=2, score_norm="fourth_root")
        raw = x.data[:, :16] @ x.data[:, :16].T
        np.testing.assert_allclose(s4.data, raw / 2.0, rtol=1e-12)
        s2 = modal_score(x, wq, wk, head=0, n_heads=2, score_norm="sqrt")
        np.testing.assert_allclose(s2.data, raw / 4.0, rtol=1e-12)

    def test_bilinear_scaling(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((4, 8)))
        wq = Tensor(rng.standard_normal((8, 8)))
        wk = Tensor(rng.standard_normal((8, 8)))
        base = modal_score(x, wq, wk, 0, 2).data
        scaled = modal_score(Tensor(2.5 * x.data), wq, wk, 0, 2).data
        np.testing.assert_allclose(scaled, 2.5 ** 2 * base, rtol=1e-10)

    def test_indivisible_heads_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            modal_score(Tensor(np.zeros((2, 6))), Tensor(np.eye(6)), Tensor(np.eye(6)),
                        0, n_heads=4)


def reference_single_stream_attention(x, p, n_heads, divisor, mask=None):
    """Plain multi-head attention, straight numpy: the independent oracle."""
    n, d_h = x.shape
    d_k = d_h // n_heads
    q, k, v = x @ p["wq"].data, x @ p["wk"].data, x @ p["wv"].data
    outs = []
    for h in range(n_heads):
        sl = slice(h * d_k, (h + 1) * d_k)
        scores = q[:, sl] @ k[:, sl].T / divisor
        if mask is not None:
            scores = scores + mask
        e = np.exp(scores - scores.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        outs.append(a @ v[:, sl])
    return np.concatenate(outs, axis=1) @ p["wo"].data


class TestFuseAndAttend:
    def test_uniform_rows_when_scores_zero(self):
        rng = np.random.default_rng(3)
        params = random_params(rng, 8)
        streams = ModalStreams(**{m: Tensor(np.zeros((4, 8))) for m in MODALITIES})
        # zero streams -> zero scores -> uniform attention; outputs are A @ V = 0,
        # so check the attention map through a trace
        trace = {"head": 0}
        fuse_and_attend(streams, None, params, n_heads=2, trace=trace)
        np.testing.assert_array_equal(trace["fused"], np.full((4, 4), 0.25))

    def test_masked_column_zero_and_value_independent(self):
        rng = np.random.default_rng(4)
        params = random_params(rng, 8)
        streams = random_streams(rng, 5, 8)
        mask = np.zeros((5, 5))
        mask[:, 3] = NEG
        trace = {"head": 1}
        out1, _ = fuse_and_attend(streams, mask, params, n_heads=2, trace=trace)
        assert np.all(trace["fused"][:, 3] == 0.0)
        # perturb every stream's row 3: outputs must not move at all
        perturbed = ModalStreams(**{
            m: Tensor(np.concatenate([t.data[:3], t.data[3:4] + 17.0, t.data[4:]]))
            for m, t in streams.as_dict().items()})
        out2, _ = fuse_and_attend(perturbed, mask, params, n_heads=2)
        for m in MODALITIES:
            rows = [0, 1, 2, 4]
            np.testing.assert_array_equal(out1[m].data[rows], out2[m].data[rows])

    def test_single_modality_reduction_matches_reference(self):
        rng = np.random.default_rng(5)
        params = random_params(rng, 16)
        x = rng.standard_normal((6, 16))
        streams = ModalStreams(sem=Tensor(x), x=Tensor(np.zeros((6, 16))),
                               y=Tensor(np.zeros((6, 16))), vis=Tensor(np.zeros((6, 16))))
        out, _ = fuse_and_attend(streams, None, params, n_heads=2)
        ref = reference_single_stream_attention(x, params["sem"], 2, 8 ** 0.25)
        np.testing.assert_allclose(out["sem"].data, ref, atol=1e-12)

    def test_cache_equivalence(self):
        rng = np.random.default_rng(6)
        params = random_params(rng, 8)
        streams = random_streams(rng, 4, 8)
        mask = build_mask("unidirectional", 4).matrix
        full, _ = fuse_and_attend(streams, mask, params, n_heads=2)
        # incremental: compute row 3 against cached rows 0-2
        prefix = ModalStreams(**{m: Tensor(t.data[:3]) for m, t in streams.as_dict().items()})
        _, kv = fuse_and_attend(prefix, mask[:3, :3], params, n_heads=2)
        last = ModalStreams(**{m: Tensor(t.data[3:4]) for m, t in streams.as_dict().items()})
        out, _ = fuse_and_attend(last, np.zeros((1, 4)), params, n_heads=2, cache=kv)
        for m in MODALITIES:
            np.testing.assert_allclose(out[m].data[0], full[m].data[3], atol=1e-12)


class TestFusedLayer:
    def test_zero_ff_reduces_to_normed_attention(self):
        rng = np.random.default_rng(7)
        params = random_params(rng, 8, zero_ff=True)
        streams = random_streams(rng, 4, 8)
        out, _ = fused_layer(streams, None, params, n_heads=2)
        att, _ = fuse_and_attend(streams, None, params, n_heads=2)
        from kvgen import ops
        for m in MODALITIES:
            h1 = ops.layer_norm(ops.add(att[m], streams.as_dict()[m]),
                                params[m]["ln1_g"], params[m]["ln1_b"])
            expect = ops.layer_norm(h1, params[m]["ln2_g"], params[m]["ln2_b"])
            np.testing.assert_allclose(out.as_dict()[m].data, expect.data, atol=1e-12)

    def test_output_shapes_match_input(self):
        rng = np.random.default_rng(8)
        params = random_params(rng, 8)
        streams = random_streams(rng, 5, 8)
        out, _ = fused_layer(streams, None, params, n_heads=2)
        for m in MODALITIES:
            assert out.as_dict()[m].shape == (5, 8)

    def test_static_layout_streams_pass_through(self):
        rng = np.random.default_rng(9)
        params = random_params(rng, 8)
        streams = random_streams(rng, 4, 8)
        out, _ = fused_layer(streams, None, params, n_heads=2, static_layout_streams=True)
        for m in ("x", "y", "vis"):
            np.testing.assert_array_equal(out.as_dict()[m].data, streams.as_dict()[m].data)
        assert not np.array_equal(out.sem.data, streams.sem.data)

    def test_gradient_through_full_layer(self):
        rng = np.random.default_rng(10)
        params = random_params(rng, 8)
        base = random_streams(rng, 4, 8)
        mask = build_mask("unidirectional", 4).matrix

        def f(t):
            streams = ModalStreams(sem=t, x=base.x, y=base.y, vis=base.vis)
            out, _ = fused_layer(streams, mask, params, n_heads=2)
            total = None
            from kvgen import ops
            for m in MODALITIES:
                s = ops.sum_(ops.mul(out.as_dict()[m], out.as_dict()[m]))
                total = s if total is None else ops.add(total, s)
            return total

        err = grad_check(f, Tensor(base.sem.data.copy()))
        assert err <= 1e-5

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(11)
        params = random_params(rng, 8)
        streams = random_streams(rng, 6, 8)
        mask = build_mask("seq2seq", 4, 2).matrix
        out, _ = fused_layer(streams, mask, params, n_heads=2)
        perm = rng.permutation(6)
        permuted = ModalStreams(**{m: Tensor(t.data[perm])
                                   for m, t in streams.as_dict().items()})
        pmask = mask[np.ix_(perm, perm)]
        pout, _ = fused_layer(permuted, pmask, params, n_heads=2)
        for m in MODALITIES:
            np.testing.assert_allclose(pout.as_dict()[m].data,
                                       out.as_dict()[m].data[perm], atol=1e-10)

    def test_mask_leak_bitwise(self):
        rng = np.random.default_rng(12)
        params = random_params(rng, 8)
        streams = random_streams(rng, 7, 8)
        mask = build_mask("seq2seq", 4, 3).matrix
        t = 1  # absolute row 5; rows 6+ are its future
        out, _ = fused_layer(streams, mask, params, n_heads=2)
        for trial in range(20):
            r = np.random.default_rng(100 + trial)
            arrays = {m: s.data.copy() for m, s in streams.as_dict().items()}
            for m in arrays:
                arrays[m][6:] = r.standard_normal((1, 8)) * 5
            pout, _ = fused_layer(ModalStreams(**{m: Tensor(a) for m, a in arrays.items()}),
                                  mask, params, n_heads=2)
            for m in MODALITIES:
                np.testing.assert_array_equal(pout.as_dict()[m].data[5], out.as_dict()[m].data[5])


class TestParameterSharing:
    def test_shared_params_feed_all_layers_and_per_layer_sem_is_isolated(self):
        from kvgen.model import KVGenModel, ModelConfig
        cfg = ModelConfig(vocab_size=10, n_layers=3, d_h=8, n_heads=2,
                          max_src_len=16, max_tgt_len=8, grid_w=4, grid_h=4,
                          dropout=0.0)
        model = KVGenModel.init(cfg, 0)
        for i in range(3):
            lp = model.layer_params(i)
            assert lp["x"]["wq"] is model.params["shared.x.wq"]
            assert lp["vis"]["ff1_w"] is model.params["shared.vis.ff1.w"]
        assert model.layer_params(0)["sem"]["wq"] is not model.layer_params(1)["sem"]["wq"]

        # layer 1's computation on fixed inputs ignores layer 0's sem params
        rng = np.random.default_rng(13)
        streams = random_streams(rng, 4, 8)
        with no_grad():
            before, _ = fused_layer(streams, None, model.layer_params(1), 2)
            model.params["layer0.sem.wq"].data += 5.0
            after, _ = fused_layer(streams, None, model.layer_params(1), 2)
        for m in MODALITIES:
            np.testing.assert_array_equal(before.as_dict()[m].data, after.as_dict()[m].data)

        # with per-layer sem params equalized, mutating the shared x params
        # changes every layer's output, and identically so
        for name, _ in model.layer_params(0)["sem"].items():
            key = name.replace("_", ".")
            model.params[f"layer1.sem.{key}"].data[:] = model.params[f"layer0.sem.{key}"].data
        with no_grad():
            outs_before = [fused_layer(streams, None, model.layer_params(i), 2)[0].x.data
                           for i in range(2)]
            model.params["shared.x.wq"].data += 1.0
            outs_after = [fused_layer(streams, None, model.layer_params(i), 2)[0].x.data
                          for i in range(2)]
        deltas = [np.abs(a - b).max() for a, b in zip(outs_after, outs_before)]
        assert all(d > 0 for d in deltas)
        np.testing.assert_array_equal(outs_after[0], outs_after[1])
