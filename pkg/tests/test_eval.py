import itertools

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy import stats as sps

from conftest import random_aligned
from hafed.eval import (compute_metrics, missing_rate_sweep, shrinkage_diagnostic, summarize_sweep,
                        wilcoxon_signed_rank)
from hafed.nn import HAFedformer, init_params
from hafed.samples import AlignedSample

floats = st.floats(-3, 3, allow_nan=False)


class TestMetrics:
    def test_hand_example(self):
        rec = compute_metrics([0.9, -1.2, 2.6], [1.2, -0.8, 2.4])
        assert rec.acc7 == pytest.approx(2 / 3, abs=1e-15)
        assert rec.acc2 == 1.0 and rec.f1 == 1.0
        assert rec.mae == pytest.approx(0.3, abs=1e-12)
        assert rec.n == 3

    def test_perfect_and_anticorrelated(self):
        y = np.array([-2.0, -0.5, 0.5, 2.0])
        perfect = compute_metrics(y, y)
        assert (perfect.acc7, perfect.acc2, perfect.f1, perfect.mae) == (1.0, 1.0, 1.0, 0.0)
        assert perfect.corr == pytest.approx(1.0, abs=1e-15)
        assert compute_metrics(-y, y).corr == pytest.approx(-1.0, abs=1e-15)

    def test_zero_labels_excluded_from_acc2(self):
        rec = compute_metrics([1.0, -1.0, 0.2], [1.0, -1.0, 0.0])
        assert rec.acc2 == 1.0
        assert compute_metrics([1.0, -1.0, 0.2], [1.0, -1.0, 0.0], exclude_zero=False).acc2 == pytest.approx(2 / 3)

    def test_undefined_fields(self):
        rec = compute_metrics([0.1, 0.2], [0.0, 0.0])
        assert rec.acc2 is None and rec.f1 is None and rec.corr is None
        assert compute_metrics([1.0, 1.0], [1.0, 2.0]).corr is None

    def test_mae_unclamped_acc7_clamped(self):
        rec = compute_metrics([5.0], [3.0])
        assert rec.acc7 == 1.0 and rec.mae == 2.0

    def test_bucket_boundary_fixtures(self):
        # shifting both sides by delta preserves Acc7 only while buckets are unchanged
        y, yhat = np.array([0.1, 1.1, -2.0]), np.array([0.2, 0.9, -1.9])
        base = compute_metrics(yhat, y).acc7
        assert compute_metrics(yhat + 0.2, y + 0.2).acc7 == base
        assert compute_metrics(yhat + 0.35, y + 0.35).acc7 != base

    def test_f1_weighted(self):
        rec = compute_metrics([1, 1, -1, 1], [1, 1, -1, -1])
        # positives: P=2/3, R=1 -> 0.8 (support 2); negatives: P=1, R=1/2 -> 2/3 (support 2)
        assert rec.f1 == pytest.approx((0.8 + 2 / 3) / 2, rel=1e-12)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_metrics([1.0], [1.0, 2.0])
        with pytest.raises(ValueError):
            compute_metrics([], [])

    @given(st.lists(floats, min_size=3, max_size=30), st.floats(0.01, 100), st.floats(-100, 100), st.data())
    def test_corr_affine_invariance(self, yhat, a, b, data):
        y = data.draw(st.lists(floats, min_size=len(yhat), max_size=len(yhat)))
        yhat, y = np.array(yhat), np.array(y)
        assume(np.std(yhat) > 1e-3 and np.std(y) > 1e-3)
        r = compute_metrics(yhat, y).corr
        assert compute_metrics(a * yhat + b, y).corr == pytest.approx(r, abs=1e-12)

    @given(st.lists(floats, min_size=1, max_size=30), st.data())
    def test_ranges(self, yhat, data):
        y = data.draw(st.lists(floats, min_size=len(yhat), max_size=len(yhat)))
        rec = compute_metrics(yhat, y)
        assert 0 <= rec.acc7 <= 1 and rec.mae >= 0
        for v in (rec.acc2, rec.f1):
            assert v is None or 0 <= v <= 1
        assert rec.corr is None or -1 <= rec.corr <= 1


def enumerate_p(d):
    """Upper-tail p by listing every sign pattern of the average-ranked |d|."""
    d = np.asarray(d, dtype=float)
    d = d[d != 0]
    ranks = sps.rankdata(np.abs(d))
    observed = ranks[d > 0].sum()
    hits = sum(1 for signs in itertools.product((0, 1), repeat=len(d))
               if np.dot(signs, ranks) >= observed - 1e-9)
    return hits / 2 ** len(d)


class TestWilcoxon:
    def test_all_positive_six(self):
        a = [3.0, 4.0, 5.0, 6.0, 7.0, 8.0]
        assert wilcoxon_signed_rank(a, np.zeros(6)) == 1 / 64

    def test_all_differences_zero(self):
        with pytest.raises(ValueError, match="all differences zero"):
            wilcoxon_signed_rank(np.ones(6), np.ones(6))

    def test_too_few_pairs(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([1, 2, 3], [0, 0, 0])

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(-6, 6), min_size=6, max_size=10))
    def test_matches_enumeration(self, diffs):
        assume(any(diffs))
        d = np.array(diffs, dtype=float)
        assert wilcoxon_signed_rank(d, np.zeros_like(d)) == pytest.approx(enumerate_p(d), abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-10, 10).filter(lambda v: abs(v) > 1e-3), min_size=6, max_size=20, unique=True))
    def test_agrees_with_scipy_exact(self, diffs):
        d = np.array(diffs)
        assume(len(np.unique(np.abs(d))) == len(d))
        ref = sps.wilcoxon(d, alternative="greater", method="exact").pvalue
        assert wilcoxon_signed_rank(d, np.zeros_like(d)) == pytest.approx(ref, rel=1e-12)

    def test_normal_approximation_close_to_scipy(self):
        d = np.random.default_rng(0).normal(0.3, 1, size=40)
        ref = sps.wilcoxon(d, alternative="greater", method="approx", correction=True).pvalue
        assert wilcoxon_signed_rank(d, np.zeros_like(d)) == pytest.approx(ref, rel=1e-9)

    @given(st.permutations(list(range(8))))
    def test_reordering_invariant(self, perm):
        a = np.array([1.3, 2.0, -0.4, 0.9, 3.1, -1.2, 0.5, 2.2])
        b = np.zeros(8)
        assert wilcoxon_signed_rank(a[perm], b[perm]) == wilcoxon_signed_rank(a, b)

    def test_margin_increase_with_fixed_ranks(self):
        a = np.array([1.0, 2.0, -3.0, 4.0, 5.0, 6.0])
        wider = a + np.where(a > 0, 0.1 * np.arange(1, 7), 0.0)  # ranks of |d| unchanged
        assert wilcoxon_signed_rank(wider, np.zeros(6)) == wilcoxon_signed_rank(a, np.zeros(6))

    def test_less_alternative_mirrors(self):
        a = np.array([1.0, 2.5, -0.5, 4.0, 3.0, 6.0])
        assert wilcoxon_signed_rank(a, np.zeros(6), "less") == wilcoxon_signed_rank(-a, np.zeros(6))


class TestShrinkage:
    def test_identical_encoders_zero(self):
        from hafed.nn import ArchSpec
        arch = ArchSpec(modalities=("L", "A"), input_dims=(3, 3), d_model=4, n_heads=2, ffn_dim=4,
                        lstm_hidden=3, dense_widths=(4,), t_min=1, t_max=5)
        p = init_params(arch, 0)
        for k in list(p.keys()):
            if k.startswith(("stem.L", "stack.L")):
                p[k.replace(".L", ".A", 1)] = p[k].copy()
        x = np.random.default_rng(0).normal(size=(4, 3))
        probe = [AlignedSample({"L": x, "A": x.copy()}, 0.0)]
        assert shrinkage_diagnostic(HAFedformer(arch), p, probe) == 0.0

    def test_two_point_case(self, tiny_arch, monkeypatch):
        model = HAFedformer(tiny_arch)
        e, v = np.array([1.0, 2.0, 0.0, -1.0]), np.array([3.0, 0.0, 4.0, 0.0])
        targets = {"L": e, "A": e + v}

        def fake_encode(params, m, x, lengths):
            return np.broadcast_to(targets[m], (x.shape[0], x.shape[1], 4)).copy()
        monkeypatch.setattr(model, "encode", fake_encode)
        probe = [AlignedSample({"L": np.ones((3, 3)), "A": np.ones((2, 2))}, 0.0)]
        assert shrinkage_diagnostic(model, init_params(tiny_arch, 0), probe) == pytest.approx(5.0, abs=1e-15)

    def test_nonnegative_on_random_model(self, tiny_arch):
        rng = np.random.default_rng(0)
        d = shrinkage_diagnostic(HAFedformer(tiny_arch), init_params(tiny_arch, 1), random_aligned(tiny_arch, 8, rng))
        assert d > 0


class TestSweep:
    def test_zero_rate_equals_plain_evaluation(self, tiny_arch):
        from hafed.eval import evaluate
        model, p = HAFedformer(tiny_arch), init_params(tiny_arch, 2)
        test = random_aligned(tiny_arch, 20, np.random.default_rng(1))
        rows = missing_rate_sweep(model, p, test, [0.0], [0, 1])
        plain, _ = evaluate(model, p, test)
        assert all(r["mae"] == plain.mae for r in rows)

    def test_reproducible_and_summarized(self, tiny_arch):
        model, p = HAFedformer(tiny_arch), init_params(tiny_arch, 2)
        test = random_aligned(tiny_arch, 20, np.random.default_rng(1))
        a = missing_rate_sweep(model, p, test, [0.3, 0.7], [0, 1, 2])
        assert a == missing_rate_sweep(model, p, test, [0.3, 0.7], [0, 1, 2])
        summary = summarize_sweep(a)
        assert [s["missing_rate"] for s in summary] == [0.3, 0.7]
        assert all(s["n_seeds"] == 3 and s["var"] >= 0 for s in summary)
