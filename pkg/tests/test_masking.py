import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from m3s.masking import (
    LengthMismatch,
    MaskPlan,
    MissingSpec,
    apply_mask,
    make_rng,
    plan_mask,
    sample_rates,
    transform_batch,
)


def changed_runs(before, after):
    """Lengths of the maximal runs of positions where the vectors differ."""
    diff = np.asarray(before) != np.asarray(after)
    runs, cur = [], 0
    for d in diff:
        if d:
            cur += 1
        elif cur:
            runs.append(cur)
            cur = 0
    if cur:
        runs.append(cur)
    return runs


class TestSpec:
    def test_ranges_validated(self):
        with pytest.raises(ValueError):
            MissingSpec.uniform(0.6, 0.4)
        with pytest.raises(ValueError):
            MissingSpec(audio=(0.0, 1.2))
        with pytest.raises(ValueError):
            MissingSpec(video=(-0.1, 0.2))

    def test_degenerate_range(self):
        assert sample_rates(MissingSpec.uniform(0.5, 0.5), make_rng(0)) == (0.5, 0.5, 0.5)

    def test_draws_inside_range(self):
        rng = make_rng(1)
        spec = MissingSpec.uniform(0.4, 0.6)
        for _ in range(2000):
            assert all(0.4 <= r <= 0.6 for r in sample_rates(spec, rng))

    def test_uniform_mean(self):
        rng = make_rng(2)
        spec = MissingSpec(audio=(0.2, 0.4))
        draws = [sample_rates(spec, rng)[0] for _ in range(100_000)]
        assert abs(np.mean(draws) - 0.3) < 0.005

    def test_modalities_independent_ranges(self):
        spec = MissingSpec(audio=(0.0, 0.1), video=(0.5, 0.5), language=(0.9, 1.0))
        a, v, l = sample_rates(spec, make_rng(3))
        assert 0 <= a <= 0.1 and v == 0.5 and 0.9 <= l <= 1.0


class TestPlan:
    def test_zero_rate_is_noop_and_uses_no_randomness(self):
        rng = make_rng(5)
        state = rng.bit_generator.state
        plan = plan_mask(10, 0.0, rng)
        assert plan.is_noop and plan.length == 0
        assert rng.bit_generator.state == state

    def test_full_rate_forces_start_zero(self):
        assert plan_mask(10, 1.0, make_rng(0)) == MaskPlan(0, 10, 10)

    def test_start_frequencies_for_t7_r_half(self):
        rng = make_rng(7)
        plans = [plan_mask(7, 0.5, rng) for _ in range(100_000)]
        assert {p.length for p in plans} == {3}
        counts = np.bincount([p.start for p in plans], minlength=5)
        assert len(counts) == 5  # admissible starts are exactly 0..4
        np.testing.assert_allclose(counts / 1e5, 0.2, atol=0.01)
        assert stats.chisquare(counts).pvalue > 0.01

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            plan_mask(0, 0.5, make_rng(0))
        with pytest.raises(ValueError):
            plan_mask(5, 1.5, make_rng(0))


class TestApply:
    def test_span(self):
        out = apply_mask(np.array([1.0, 2.0, 3.0, 4.0]), MaskPlan(1, 2, 4))
        np.testing.assert_array_equal(out, [1, 0, 0, 4])

    def test_noop(self):
        x = np.array([3.0, -1.0, 2.0])
        np.testing.assert_array_equal(apply_mask(x, MaskPlan(0, 0, 3)), x)

    def test_full(self):
        np.testing.assert_array_equal(apply_mask(np.full(5, 5.0), MaskPlan(0, 5, 5)), np.zeros(5))

    def test_input_not_mutated(self):
        x = np.arange(1.0, 6.0)
        apply_mask(x, MaskPlan(1, 3, 5))
        np.testing.assert_array_equal(x, np.arange(1.0, 6.0))

    def test_length_checked(self):
        with pytest.raises(LengthMismatch):
            apply_mask(np.ones(4), MaskPlan(0, 2, 5))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 64), st.floats(0, 1), st.integers(0, 2**32 - 1))
    def test_contiguous_count_and_idempotent(self, dim, rate, seed):
        rng = make_rng(seed)
        x = rng.uniform(0.5, 2.0, dim)  # no zero entries
        plan = plan_mask(dim, rate, rng)
        out = apply_mask(x, plan)
        k = math.floor(dim * rate)
        assert plan.length == k
        assert changed_runs(x, out) == ([k] if k else [])
        assert 0 <= plan.start <= dim - k
        np.testing.assert_array_equal(apply_mask(out, plan), out)


def test_count_exact_on_full_grid():
    rng = make_rng(11)
    for dim in range(1, 65):
        x = np.arange(1.0, dim + 1.0)
        for i in range(11):
            rate = i / 10
            plan = plan_mask(dim, rate, rng)
            out = apply_mask(x, plan)
            k = math.floor(dim * Fraction(i, 10))
            assert int(np.sum(out != x)) == k
            assert changed_runs(x, out) == ([k] if k else [])


class TestTransformBatch:
    def feats(self, n=100, dims=(20, 10, 30), seed=0):
        rng = np.random.default_rng(seed)
        return tuple(rng.uniform(0.5, 1.5, (n, d)) for d in dims)

    def test_zero_spec_is_identity(self):
        x = self.feats()
        out = transform_batch(x, MissingSpec(), make_rng(0))
        for a, b in zip(x, out):
            np.testing.assert_array_equal(a, b)

    def test_deterministic(self):
        x = self.feats()
        spec = MissingSpec.uniform(0.4, 0.6)
        a = transform_batch(x, spec, make_rng(9))
        b = transform_batch(x, spec, make_rng(9))
        for u, v in zip(a, b):
            assert u.tobytes() == v.tobytes()

    def test_every_audio_row_has_8_to_12_zeros(self):
        x = self.feats()
        out = transform_batch(x, MissingSpec.uniform(0.4, 0.6), make_rng(4))
        for before, after in zip(x[0], out[0]):
            runs = changed_runs(before, after)
            assert len(runs) == 1 and 8 <= runs[0] <= 12

    def test_per_sample_masks_differ(self):
        x = self.feats()
        out = transform_batch(x, MissingSpec.uniform(0.4, 0.6), make_rng(4))
        patterns = {tuple(row == 0) for row in out[2]}
        assert len(patterns) > 10

    def test_per_batch_masks_shared(self):
        x = self.feats()
        out = transform_batch(x, MissingSpec.uniform(0.4, 0.6), make_rng(4), granularity="per_batch")
        for m in out:
            patterns = {tuple(row == 0) for row in m}
            assert len(patterns) == 1

    def test_input_untouched(self):
        x = self.feats()
        copies = tuple(f.copy() for f in x)
        transform_batch(x, MissingSpec.uniform(0.4, 0.6), make_rng(0))
        for a, b in zip(x, copies):
            np.testing.assert_array_equal(a, b)

    def test_mismatched_batch(self):
        x = self.feats()
        with pytest.raises(LengthMismatch):
            transform_batch((x[0], x[1][:5], x[2]), MissingSpec(), make_rng(0))
