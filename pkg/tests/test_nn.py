from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import finite_difference_errors, random_aligned, random_seq
from hafed.nn import (ArchSpec, HAFedformer, add_positional_encoding, backward, decoder_forward,
                      encoder_stack_forward, fuse_embeddings, init_params, make_aligned_batch,
                      make_seq_batch, model_forward, param_count, stack_layers, stem_forward)
from hafed.nn import layers as L
from hafed.samples import AlignedSample, SeqSample


def hand_count(arch):
    D, F, H = arch.d_model, arch.ffn_dim, arch.lstm_hidden
    stems = sum(d * D + D for d in arch.input_dims)
    layer = 4 * (D * D + D) + 4 * D + (D * F + F) + (F * D + D)
    stacks = arch.n_modalities * arch.n_layers * layer
    dec = D * 4 * H + H * 4 * H + 4 * H
    prev = H
    for w in arch.dense_widths:
        dec += prev * w + w + w * w + w
        prev = w
    return stems + stacks + dec + prev + 1


class TestInit:
    def test_deterministic(self, tiny_arch):
        assert init_params(tiny_arch, 7).equals(init_params(tiny_arch, 7))

    def test_seed_sensitive(self, tiny_arch):
        assert not init_params(tiny_arch, 7).equals(init_params(tiny_arch, 8))

    @pytest.mark.parametrize("arch", [
        ArchSpec(),
        ArchSpec(input_dims=(3, 2, 4), d_model=4, n_heads=2, ffn_dim=6, lstm_hidden=3, dense_widths=(4,)),
        ArchSpec(modalities=("L", "A"), input_dims=(5, 7), d_model=6, n_heads=3, n_layers=2,
                 ffn_dim=5, lstm_hidden=4, dense_widths=(3, 5)),
    ])
    def test_count_matches_hand_count(self, arch):
        assert init_params(arch, 0).size() == hand_count(arch) == param_count(arch)

    def test_forget_bias_and_bounds(self, tiny_arch):
        p = init_params(tiny_arch, 3)
        H = tiny_arch.lstm_hidden
        np.testing.assert_array_equal(p["decoder.lstm.b"][H:2 * H], 1.0)
        assert np.all(np.abs(p["stem.L.W"]) <= 1 / np.sqrt(3))
        assert np.all(p["stack.A.0.ln1_g"] == 1.0)

    def test_invalid_arch(self):
        with pytest.raises(ValueError):
            ArchSpec(d_model=6, n_heads=4)
        with pytest.raises(ValueError):
            ArchSpec(out_min=3, out_max=-3)


class TestStem:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).normal(size=(5, 4))
        np.testing.assert_array_equal(stem_forward(x, np.eye(4), np.zeros(4)), x)

    def test_zero_input_gives_bias_rows(self):
        b = np.array([1.0, -2.0, 0.5])
        out = stem_forward(np.zeros((4, 2)), np.ones((2, 3)), b)
        np.testing.assert_array_equal(out, np.tile(b, (4, 1)))

    def test_naive_loop_oracle(self):
        rng = np.random.default_rng(1)
        x, W, b = rng.normal(size=(6, 3)), rng.normal(size=(3, 5)), rng.normal(size=5)
        expected = np.zeros((6, 5))
        for t in range(6):
            for j in range(5):
                acc = b[j]
                for i in range(3):
                    acc += x[t, i] * W[i, j]
                expected[t, j] = acc
        np.testing.assert_allclose(stem_forward(x, W, b), expected, rtol=1e-13)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            stem_forward(np.zeros((3, 4)), np.zeros((5, 2)), np.zeros(2))


class TestPositionalEncoding:
    def test_row_zero_alternates(self):
        pe = add_positional_encoding(np.zeros((3, 6)))
        np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1])

    def test_input_independent(self):
        rng = np.random.default_rng(2)
        x, x2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
        np.testing.assert_allclose(add_positional_encoding(x) - x, add_positional_encoding(x2) - x2,
                                   atol=1e-15)

    def test_scalar_value(self):
        pe = add_positional_encoding(np.zeros((2, 4)))
        assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
        assert pe[1, 2] == pytest.approx(np.sin(1 / 100.0), abs=1e-15)


class TestEncoderStack:
    @pytest.mark.parametrize("T", [1, 2, 7])
    def test_shape(self, tiny_arch, T):
        p = init_params(tiny_arch, 0)
        x = np.random.default_rng(T).normal(size=(T, 4))
        assert encoder_stack_forward(x, stack_layers(p, tiny_arch, "L"), 2).shape == (T, 4)

    def test_single_step_attention_weight_is_one(self, tiny_arch):
        p = init_params(tiny_arch, 0)
        x = np.random.default_rng(0).normal(size=(1, 1, 4))
        _, cache = L.mha_forward(x, stack_layers(p, tiny_arch, "A")[0], 2, np.ones((1, 1), bool))
        np.testing.assert_array_equal(cache[7], 1.0)

    def test_post_norm_output_is_normalized(self, tiny_arch):
        p = stack_layers(init_params(tiny_arch, 0), tiny_arch, "L")
        e = encoder_stack_forward(np.random.default_rng(0).normal(size=(3, 4)), p, 2, norm="post")
        np.testing.assert_allclose(e.mean(axis=1), 0, atol=1e-12)

    def test_unknown_norm(self, tiny_arch):
        with pytest.raises(ValueError):
            ArchSpec(norm="mid")

    @pytest.mark.parametrize("norm", ["pre", "post"])
    def test_head_permutation_invariance(self, tiny_arch, norm):
        p = stack_layers(init_params(tiny_arch, 4), tiny_arch, "V")[0]
        x = np.random.default_rng(5).normal(size=(3, 4))
        ref = encoder_stack_forward(x, [p], 2, norm)
        perm = np.r_[2:4, 0:2]  # swap the two heads (2 dims each)
        q = dict(p)
        for k in ("Wq", "Wk", "Wv"):
            q[k] = p[k][:, perm]
        for k in ("bq", "bk", "bv"):
            q[k] = p[k][perm]
        q["Wo"] = p["Wo"][perm, :]
        np.testing.assert_allclose(encoder_stack_forward(x, [q], 2, norm), ref, atol=1e-13)

    def test_nonfinite_signals_divergence(self, tiny_arch):
        p = stack_layers(init_params(tiny_arch, 0), tiny_arch, "L")
        p[0] = dict(p[0], Wq=np.full((4, 4), np.nan))
        with pytest.raises(FloatingPointError):
            encoder_stack_forward(np.ones((2, 4)), p, 2)


class TestFusion:
    def test_identical_inputs(self):
        e = np.arange(6.0).reshape(3, 2)
        np.testing.assert_array_equal(fuse_embeddings([e, e, e]), e)

    def test_masked_single_survivor(self):
        a, b = np.ones((2, 2)), np.full((2, 2), 9.0)
        np.testing.assert_array_equal(fuse_embeddings([a, b], [True, False]), a)

    def test_hand_mean(self):
        np.testing.assert_array_equal(fuse_embeddings([np.array([[1.0, 3.0]]), np.array([[3.0, 5.0]])]),
                                      [[2.0, 4.0]])

    def test_empty_mask(self):
        with pytest.raises(ValueError):
            fuse_embeddings([np.ones(2)], [False])

    @given(st.lists(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), min_size=1, max_size=5),
           st.randoms(use_true_random=False), st.integers(1, 4))
    def test_permutation_invariant_and_idempotent(self, rows, rnd, k):
        embs = [np.array(r) for r in rows]
        shuffled = list(embs)
        rnd.shuffle(shuffled)
        np.testing.assert_allclose(fuse_embeddings(shuffled), fuse_embeddings(embs), rtol=1e-12, atol=1e-9)
        np.testing.assert_allclose(fuse_embeddings([embs[0]] * k), embs[0], rtol=1e-15)


def _sig(z):
    return 1 / (1 + np.exp(-z))


class TestDecoder:
    def test_zero_params_zero_input(self, tiny_arch):
        p = init_params(tiny_arch, 0).map(np.zeros_like)
        assert decoder_forward(np.zeros((3, 4)), p, tiny_arch) == 0.0

    def test_single_step_cell_oracle(self):
        arch = ArchSpec(modalities=("L",), input_dims=(2,), d_model=2, n_heads=1, ffn_dim=2,
                        lstm_hidden=2, dense_widths=(2,), t_min=1, t_max=1)
        p = init_params(arch, 11)
        x = np.array([0.3, -0.7])
        Wx, Wh, b = p["decoder.lstm.Wx"], p["decoder.lstm.Wh"], p["decoder.lstm.b"]
        # one cell step from zero state, gates written out element by element
        h = np.zeros(2)
        for j in range(2):
            z = [b[g * 2 + j] + sum(x[i] * Wx[i, g * 2 + j] for i in range(2)) for g in range(4)]
            i_g, f_g, g_g, o_g = _sig(z[0]), _sig(z[1]), np.tanh(z[2]), _sig(z[3])
            c = f_g * 0.0 + i_g * g_g
            h[j] = o_g * np.tanh(c)
        a = np.maximum(h @ p["decoder.proj0.W"] + p["decoder.proj0.b"], 0)
        a = a + np.maximum(a @ p["decoder.res0.W"] + p["decoder.res0.b"], 0)
        expected = float(a @ p["decoder.out.W"][:, 0] + p["decoder.out.b"][0])
        assert decoder_forward(x[None], p, arch) == pytest.approx(expected, rel=1e-13, abs=1e-15)

    def test_deterministic(self, tiny_arch):
        p = init_params(tiny_arch, 1)
        f = np.random.default_rng(0).normal(size=(4, 4))
        assert decoder_forward(f, p, tiny_arch) == decoder_forward(f.copy(), p, tiny_arch)

    def test_padding_does_not_leak(self, tiny_arch):
        model = HAFedformer(tiny_arch)
        p = init_params(tiny_arch, 2)
        rng = np.random.default_rng(3)
        short = SeqSample(rng.normal(size=(2, 3)), "L", 0.0)
        long = SeqSample(rng.normal(size=(5, 3)), "L", 0.0)
        alone = model.predict(p, make_seq_batch([short], "L", 3))[0]
        batched = model.predict(p, make_seq_batch([short, long], "L", 3))[0]
        assert alone == pytest.approx(batched, rel=1e-12)


class TestModelForward:
    def test_single_modality_paths_coincide(self):
        arch = ArchSpec(modalities=("L",), input_dims=(3,), d_model=4, n_heads=2, ffn_dim=4,
                        lstm_hidden=3, dense_widths=(4,), t_min=1, t_max=5)
        p = init_params(arch, 0)
        x = np.random.default_rng(0).normal(size=(4, 3))
        assert model_forward(SeqSample(x, "L", 0.5), p, arch, ("client", "L")) == \
            model_forward(AlignedSample({"L": x}, 0.5), p, arch, "global")

    def test_identical_stacks_reduce_to_one(self, tiny_arch):
        p = init_params(tiny_arch, 5)
        for m in ("A", "V"):
            for k in list(p.keys()):
                if k.startswith("stack.L."):
                    p[k.replace("stack.L.", f"stack.{m}.")] = p[k].copy()
        x = np.random.default_rng(1).normal(size=(3, 3))
        e = encoder_stack_forward(add_positional_encoding(stem_forward(x, p["stem.L.W"], p["stem.L.b"])),
                                  stack_layers(p, tiny_arch, "L"), 2)
        expected = decoder_forward(e, p, tiny_arch)
        assert model_forward(SeqSample(x, "L", 0.0), p, tiny_arch) == pytest.approx(expected, rel=1e-12)

    def test_global_matches_composed_ops(self):
        arch = ArchSpec(modalities=("L", "A"), input_dims=(3, 2), d_model=4, n_heads=2, ffn_dim=5,
                        lstm_hidden=3, dense_widths=(4,), t_min=1, t_max=6)
        p = init_params(arch, 9)
        rng = np.random.default_rng(4)
        xs = {"L": rng.normal(size=(4, 3)), "A": rng.normal(size=(4, 2))}
        embs = [encoder_stack_forward(add_positional_encoding(stem_forward(xs[m], p[f"stem.{m}.W"], p[f"stem.{m}.b"])),
                                      stack_layers(p, arch, m), 2) for m in ("L", "A")]
        expected = decoder_forward(fuse_embeddings(embs), p, arch)
        got = model_forward(AlignedSample(xs, 1.0), p, arch, "global")
        assert got == pytest.approx(expected, rel=1e-12)

    def test_unaligned_fusion_averages_covering_modalities(self):
        arch = ArchSpec(modalities=("L", "A"), input_dims=(2, 2), d_model=2, n_heads=1, ffn_dim=2,
                        lstm_hidden=2, dense_widths=(2,), t_min=1, t_max=4)
        model = HAFedformer(arch)
        p = init_params(arch, 1)
        rng = np.random.default_rng(0)
        xs = {"L": rng.normal(size=(4, 2)), "A": rng.normal(size=(2, 2))}
        eL = model.encode(p, "L", xs["L"][None], np.array([4]))[0]
        eA = model.encode(p, "A", xs["A"][None], np.array([2]))[0]
        fused = np.vstack([(eL[:2] + eA) / 2, eL[2:]])
        expected = decoder_forward(fused, p, arch)
        assert model_forward(AlignedSample(xs, 0.0), p, arch, "global") == pytest.approx(expected, rel=1e-12)

    def test_mode_mismatch(self, tiny_arch):
        p = init_params(tiny_arch, 0)
        with pytest.raises(ValueError):
            model_forward(SeqSample(np.zeros((2, 3)), "L", 0.0), p, tiny_arch, "global")
        with pytest.raises(ValueError):
            model_forward(SeqSample(np.zeros((2, 3)), "L", 0.0), p, tiny_arch, ("client", "A"))


class TestBackward:
    def test_exact_fit_zero_gradient(self, tiny_arch):
        p = init_params(tiny_arch, 0)
        s = SeqSample(np.random.default_rng(0).normal(size=(3, 3)), "L", 0.0)
        pred = model_forward(s, p, tiny_arch)
        s = SeqSample(s.x, "L", pred)
        g = backward(s, p, tiny_arch)
        assert np.all(g.flat() == 0.0)

    @pytest.mark.parametrize("norm", ["pre", "post"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_client_mode_finite_differences(self, tiny_arch, seed, norm):
        rng = np.random.default_rng(seed)
        tiny_arch = replace(tiny_arch, norm=norm)
        model = HAFedformer(tiny_arch)
        p = init_params(tiny_arch, seed)
        m = tiny_arch.modalities[seed % 3]
        batch = make_seq_batch(random_seq(tiny_arch, m, 3, rng), m, tiny_arch.dim(m))
        assert finite_difference_errors(model, p, batch).max() < 1e-4

    @pytest.mark.parametrize("norm", ["pre", "post"])
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_global_mode_finite_differences(self, tiny_arch, seed, norm):
        rng = np.random.default_rng(10 + seed)
        tiny_arch = replace(tiny_arch, norm=norm)
        model = HAFedformer(tiny_arch)
        p = init_params(tiny_arch, seed)
        batch = make_aligned_batch(random_aligned(tiny_arch, 3, rng, p_missing=0.3), tiny_arch)
        assert finite_difference_errors(model, p, batch).max() < 1e-4

    def test_l1_loss_finite_differences(self, tiny_arch):
        rng = np.random.default_rng(7)
        model = HAFedformer(tiny_arch, "l1")
        p = init_params(tiny_arch, 7)
        batch = make_seq_batch(random_seq(tiny_arch, "A", 3, rng), "A", 2)
        assert finite_difference_errors(model, p, batch).max() < 1e-4

    def test_unreached_stems_zero(self, tiny_arch):
        p = init_params(tiny_arch, 0)
        s = SeqSample(np.random.default_rng(0).normal(size=(4, 2)), "A", 2.0)
        g = backward(s, p, tiny_arch)
        for k in g.keys():
            if k.startswith(("stem.L", "stem.V")):
                assert np.all(g[k] == 0.0), k
            elif k.startswith(("stack.", "decoder.")) and k.endswith(("W", "Wx", "Wq")):
                assert np.any(g[k] != 0.0), k
        assert np.any(g["stem.A.W"] != 0)

    def test_key_sets_match(self, tiny_arch):
        p = init_params(tiny_arch, 0)
        s = AlignedSample({"L": np.ones((2, 3))}, 1.0)
        g = backward(s, p, tiny_arch, "global")
        assert g.shapes() == p.shapes() and g.tags == p.tags
