"""Trace data model, file IO, synthetic generation, and pricing."""

import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from ccpo.env import answer_universe
from ccpo.traces import (
    CallSet,
    PriceTable,
    RoundRecord,
    SyntheticConfig,
    Trace,
    TraceFormatError,
    TraceValidationError,
    generate_synthetic,
    load_traces,
    read_trace_file,
    save_traces,
    step_cost,
    validate_trace,
)


def make_round(**kwargs) -> RoundRecord:
    base = dict(
        base_answer=1,
        guide_agrees=0,
        guide_answer=2,
        guide_uncertainty=0.4,
        base_tokens_in=100,
        base_tokens_out=40,
        guide_tokens_in=200,
        guide_tokens_out=5,
    )
    base.update(kwargs)
    return RoundRecord(**base)


def make_trace(T=4, vocab=10, **kwargs) -> Trace:
    base = dict(
        question_id="q0",
        true_answer=1,
        rounds=tuple(make_round() for _ in range(T)),
        solvable_hint=None,
    )
    base.update(kwargs)
    return Trace(**base)


class TestValidation:
    def test_valid_trace_passes(self):
        validate_trace(make_trace(), horizon=4, vocab_size=10)

    def test_wrong_round_count_names_rounds(self):
        with pytest.raises(TraceValidationError, match="rounds"):
            validate_trace(make_trace(T=3), horizon=4, vocab_size=10)

    def test_agreement_forces_equal_answers(self):
        bad = make_trace(rounds=tuple([make_round(guide_agrees=1, guide_answer=3)] * 4))
        with pytest.raises(TraceValidationError, match="guide_answer"):
            validate_trace(bad, horizon=4, vocab_size=10)

    def test_uncertainty_out_of_range(self):
        bad = make_trace(rounds=tuple([make_round(guide_uncertainty=1.5)] * 4))
        with pytest.raises(TraceValidationError, match="guide_uncertainty"):
            validate_trace(bad, horizon=4, vocab_size=10)

    @given(
        field=st.sampled_from(
            ["base_answer", "guide_answer", "guide_uncertainty", "base_tokens_in", "guide_agrees"]
        ),
        value=st.integers(min_value=-5, max_value=30),
        round_idx=st.integers(min_value=0, max_value=3),
    )
    @settings(max_examples=200, deadline=None)
    def test_mutations_rejected_iff_invariant_broken(self, field, value, round_idx):
        """Random single-field mutations: rejection happens exactly when an
        invariant is broken."""
        trace = make_trace()
        rounds = list(trace.rounds)
        rec = rounds[round_idx]
        if field == "guide_uncertainty":
            new_value = value / 10.0
        else:
            new_value = value
        rec = dataclasses.replace(rec, **{field: new_value})
        rounds[round_idx] = rec
        mutated = dataclasses.replace(trace, rounds=tuple(rounds))

        broken = False
        if field in ("base_answer", "guide_answer") and not (0 <= new_value < 10):
            broken = True
        if field == "guide_uncertainty" and not (0.0 <= new_value <= 1.0):
            broken = True
        if field == "base_tokens_in" and new_value < 0:
            broken = True
        if field == "guide_agrees" and new_value not in (0, 1):
            broken = True
        if rec.guide_agrees == 1 and rec.guide_answer != rec.base_answer:
            broken = True

        if broken:
            with pytest.raises(TraceValidationError):
                validate_trace(mutated, horizon=4, vocab_size=10)
        else:
            validate_trace(mutated, horizon=4, vocab_size=10)


class TestStepCost:
    def test_zero_prices(self):
        assert step_cost(make_round(), CallSet(), PriceTable()) == 0.0

    def test_guide_pricing_arithmetic(self):
        rec = make_round(guide_tokens_in=100, guide_tokens_out=5)
        prices = PriceTable(guide_in=0.01, guide_out=0.03)
        assert step_cost(rec, CallSet(base=True, guide=True), prices) == pytest.approx(1.15)

    def test_episode_sum_matches_independent_token_sum(self):
        # Oracle: total = sum of each token field over the episode times its price.
        traces = generate_synthetic(SyntheticConfig(num_traces=5, seed=11))
        prices = PriceTable(base_in=0.001, base_out=0.002, guide_in=0.01, guide_out=0.05)
        for trace in traces:
            per_step = sum(step_cost(r, CallSet(), prices) for r in trace.rounds)
            expected = (
                sum(r.base_tokens_in for r in trace.rounds) * 0.001
                + sum(r.base_tokens_out for r in trace.rounds) * 0.002
                + sum(r.guide_tokens_in for r in trace.rounds) * 0.01
                + sum(r.guide_tokens_out for r in trace.rounds) * 0.05
            )
            assert per_step == pytest.approx(expected, rel=1e-12)

    @given(scale=st.floats(min_value=0.0, max_value=100.0))
    @settings(max_examples=50, deadline=None)
    def test_homogeneous_in_prices(self, scale):
        rec = make_round()
        prices = PriceTable(base_in=0.1, base_out=0.2, guide_in=0.3, guide_out=0.4)
        scaled = PriceTable(
            base_in=0.1 * scale, base_out=0.2 * scale, guide_in=0.3 * scale, guide_out=0.4 * scale
        )
        assert step_cost(rec, CallSet(), scaled) == pytest.approx(scale * step_cost(rec, CallSet(), prices))

    def test_additive_in_price_tables(self):
        rec = make_round()
        p1 = PriceTable(base_in=0.1, guide_in=0.3)
        p2 = PriceTable(base_out=0.2, guide_out=0.4)
        both = PriceTable(base_in=0.1, base_out=0.2, guide_in=0.3, guide_out=0.4)
        assert step_cost(rec, CallSet(), both) == pytest.approx(
            step_cost(rec, CallSet(), p1) + step_cost(rec, CallSet(), p2)
        )

    def test_call_context_restricts_charges(self):
        rec = make_round(base_tokens_in=10, base_tokens_out=0, guide_tokens_in=20, guide_tokens_out=0)
        prices = PriceTable(base_in=1.0, guide_in=1.0)
        assert step_cost(rec, CallSet(base=True, guide=False), prices) == 10.0
        assert step_cost(rec, CallSet(base=False, guide=True), prices) == 20.0


class TestFileIO:
    def test_load_three_valid_records(self, tmp_path):
        traces = generate_synthetic(SyntheticConfig(num_traces=3, seed=0))
        path = tmp_path / "three.ndjson"
        save_traces(path, traces, 4, 50)
        assert len(load_traces(path)) == 3

    def test_round_count_mismatch_is_validation_error(self, tmp_path):
        traces = generate_synthetic(SyntheticConfig(num_traces=1, horizon=3, seed=0))
        path = tmp_path / "short.ndjson"
        save_traces(path, traces, 4, 50)  # header horizon disagrees with the records
        with pytest.raises(TraceValidationError, match="rounds"):
            load_traces(path)

    def test_malformed_line_names_line_number(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        traces = generate_synthetic(SyntheticConfig(num_traces=2, seed=0))
        save_traces(path, traces, 4, 50)
        with open(path, "a") as fh:
            fh.write("{not json\n")
        with pytest.raises(TraceFormatError, match="line 4"):
            load_traces(path)

    def test_roundtrip_identity(self, tmp_path):
        traces = generate_synthetic(SyntheticConfig(num_traces=60, seed=5))
        path = tmp_path / "corpus.ndjson"
        save_traces(path, traces, 4, 50)
        assert load_traces(path) == traces

    def test_header_extras_survive(self, tmp_path):
        traces = generate_synthetic(SyntheticConfig(num_traces=1, seed=0))
        path = tmp_path / "extras.ndjson"
        save_traces(path, traces, 4, 50, extras={"note": "hello"})
        assert read_trace_file(path).extras == {"note": "hello"}


class TestGenerateSynthetic:
    def test_zero_unsolvable_fraction_forces_solvable(self):
        traces = generate_synthetic(SyntheticConfig(num_traces=500, unsolvable_fraction=0.0, seed=1))
        assert all(t.true_answer in answer_universe(t) for t in traces)

    def test_same_seed_identical(self):
        cfg = SyntheticConfig(num_traces=50, seed=123)
        assert generate_synthetic(cfg) == generate_synthetic(cfg)

    def test_different_seed_differs(self):
        a = generate_synthetic(SyntheticConfig(num_traces=50, seed=1))
        b = generate_synthetic(SyntheticConfig(num_traces=50, seed=2))
        assert a != b

    def test_unsolvable_rate_near_config(self):
        # Counted with the answer universe, the independent route.
        traces = generate_synthetic(SyntheticConfig(num_traces=10000, unsolvable_fraction=0.2, seed=9))
        rate = np.mean([t.true_answer not in answer_universe(t) for t in traces])
        assert abs(rate - 0.2) <= 0.02

    def test_solvable_hint_matches_universe(self):
        traces = generate_synthetic(SyntheticConfig(num_traces=300, unsolvable_fraction=0.3, seed=2))
        for t in traces:
            assert t.solvable_hint == (t.true_answer in answer_universe(t))

    def test_uncertainty_anticorrelates_with_guide_correctness(self):
        traces = generate_synthetic(SyntheticConfig(num_traces=2000, seed=4))
        u, right = [], []
        for t in traces:
            for rec in t.rounds:
                u.append(rec.guide_uncertainty)
                right.append(float(rec.guide_answer == t.true_answer))
        rho, _ = stats.spearmanr(u, right)
        assert rho < -0.3

    def test_generated_traces_validate(self):
        cfg = SyntheticConfig(num_traces=200, seed=8)
        for t in generate_synthetic(cfg):
            validate_trace(t, cfg.horizon, cfg.answer_vocab_size)

    def test_invalid_config_rejected(self):
        with pytest.raises(TraceValidationError):
            generate_synthetic(SyntheticConfig(num_traces=1, unsolvable_fraction=1.5))
        with pytest.raises(TraceValidationError):
            generate_synthetic(SyntheticConfig(num_traces=1, horizon=0))
        with pytest.raises(TraceValidationError):
            generate_synthetic(SyntheticConfig(num_traces=1, guide_correct=-0.1))

    def test_base_correctness_nondecreasing_in_round(self):
        traces = generate_synthetic(SyntheticConfig(num_traces=8000, unsolvable_fraction=0.0, seed=13))
        per_round = np.zeros(4)
        for t in traces:
            for i, rec in enumerate(t.rounds):
                per_round[i] += rec.base_answer == t.true_answer
        per_round /= len(traces)
        # Allow small sampling slack on the ordering.
        assert np.all(np.diff(per_round) > -0.02)
