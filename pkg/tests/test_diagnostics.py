import io

import numpy as np
import pytest

from oracles import scalar_forward
from ropelab.attention import forward_logits, gaussian_inputs, init_random, softmax_scores
from ropelab.diagnostics import (
    CSV_HEADER,
    DEFAULT_LENGTHS,
    DEFAULT_SHIFTS,
    DiffConfig,
    length_sweep,
    logit_diff_first_token,
    normalization_vector,
    per_token_diff,
    score_diff_D,
    shift_sweep,
    sweep_json,
    write_csv,
)
from ropelab.precision import POLICIES

POLICY_TUPLES = {
    "exact": ("f64", "f64", "f64"),
    "f32": ("f32", "f32", "f32"),
    "fa2-bf16": ("f32", "bf16", "f32"),
}


@pytest.fixture(scope="module")
def small():
    return init_random(2, 2, 32, seed=1), gaussian_inputs(48, 32, seed=1)


def test_normalization_vector():
    n = normalization_vector(4)
    np.testing.assert_array_equal(n, [0.25, 1 / 3, 0.5, 1.0])
    assert len(DiffConfig(sequence_length=7).n) == 7


def test_default_lists():
    assert DEFAULT_SHIFTS[0] == 0 and DEFAULT_SHIFTS[-1] == 2000 and len(DEFAULT_SHIFTS) == 19
    assert DEFAULT_LENGTHS == (64, 128, 256, 512, 1024, 2048, 4096, 8192)


@pytest.mark.parametrize("name", list(POLICIES))
def test_equal_shifts_give_zero(small, name):
    stack, X = small
    report = score_diff_D(stack, X, 9, 9, name)
    assert report.D == 0.0
    assert not report.per_token.any()
    assert logit_diff_first_token(stack, X, 9, 9, name) == 0.0


@pytest.mark.parametrize("name", list(POLICIES))
def test_symmetry(small, name):
    stack, X = small
    assert score_diff_D(stack, X, 0, 16, name).D == score_diff_D(stack, X, 16, 0, name).D


def test_per_token_sums_to_D(small):
    stack, X = small
    report = score_diff_D(stack, X, 3, 40, "fa2-bf16")
    assert np.all(report.per_token >= 0) and np.all(report.per_layer_head >= 0)
    assert abs(report.per_token.sum() - report.D) <= 1e-12 * report.D
    assert abs(report.per_layer_head.sum() - report.D) <= 1e-12 * report.D
    np.testing.assert_array_equal(per_token_diff(stack, X, 3, 40, "fa2-bf16"), report.per_token)


def test_D_matches_direct_formula(small):
    stack, X = small
    policy = POLICIES["f32"]
    s1 = softmax_scores(forward_logits(stack, X, 0, policy), precision="f32")
    s2 = softmax_scores(forward_logits(stack, X, 16, policy), precision="f32")
    T = X.shape[0]
    direct = float((np.abs(s1 - s2).sum(axis=-2) / (T - np.arange(T))).sum())
    assert score_diff_D(stack, X, 0, 16, policy).D == pytest.approx(direct, rel=1e-12)


def test_exact_policy_is_small():
    stack = init_random(2, 4, 64, seed=2)
    X = gaussian_inputs(128, 64, seed=2)
    assert score_diff_D(stack, X, 0, 16, "exact").D <= 1e-6
    logits = forward_logits(stack, X, 0, "exact")
    assert logit_diff_first_token(stack, X, 0, 16, "exact") <= 1e-8 * np.abs(logits).max()


def test_fa2_exceeds_f32(small):
    stack, X = small
    d_f32 = score_diff_D(stack, X, 0, 16, "f32").D
    d_fa2 = score_diff_D(stack, X, 0, 16, "fa2-bf16").D
    assert d_fa2 > d_f32 > 0


def test_logit_diff_hand_case():
    # one layer, one head, d_model 2, T 1: compare against the straight-line loops
    stack = init_random(1, 1, 2, seed=4)
    X = gaussian_inputs(1, 2, seed=4)
    wq = [stack.layers[0].w_q.tolist()]
    wk = [stack.layers[0].w_k.tolist()]
    for name, tup in POLICY_TUPLES.items():
        a = scalar_forward(wq, wk, X.tolist(), 1, list(stack.rotary.freqs), 0, tup)[0][0][0][0]
        b = scalar_forward(wq, wk, X.tolist(), 1, list(stack.rotary.freqs), 16, tup)[0][0][0][0]
        assert logit_diff_first_token(stack, X, 0, 16, name) == abs(a - b)


def test_logit_diff_matches_oracle_multi_token():
    stack = init_random(2, 2, 8, seed=6)
    X = gaussian_inputs(6, 8, seed=6)
    wq = [l.w_q.tolist() for l in stack.layers]
    wk = [l.w_k.tolist() for l in stack.layers]
    for name, tup in POLICY_TUPLES.items():
        a = np.array(scalar_forward(wq, wk, X.tolist(), 2, list(stack.rotary.freqs), 0, tup))
        b = np.array(scalar_forward(wq, wk, X.tolist(), 2, list(stack.rotary.freqs), 7, tup))
        expected = np.abs(a[..., 0] - b[..., 0]).sum() / 6
        assert logit_diff_first_token(stack, X, 0, 7, name) == pytest.approx(expected, rel=1e-12, abs=0)


def test_negative_shift_rejected(small):
    stack, X = small
    with pytest.raises(ValueError):
        score_diff_D(stack, X, -1, 0)


def test_huge_shift_overflows(small):
    stack, X = small
    with pytest.raises(OverflowError):
        score_diff_D(stack, X, 2**53, 0)


def test_shift_sweep_rows(small):
    stack, _ = small
    result = shift_sweep(stack, [0, 16, 100], 16, "exact", num_sequences=2, T=32, seed=3)
    assert [r.delta1 for r in result.rows] == [0, 16, 100]
    assert result.rows[1].value == 0.0
    assert all(r.value <= 1e-6 for r in result.rows)
    assert all(len(v) == 2 for v in result.per_sequence.values())
    np.testing.assert_allclose(result.per_token[100].sum(), result.rows[2].value, rtol=1e-12, atol=1e-300)


def test_shift_sweep_mean_matches_single_reports(small):
    stack, _ = small
    result = shift_sweep(stack, [4], 16, "fa2-bf16", num_sequences=3, T=24, seed=5)
    singles = [score_diff_D(stack, gaussian_inputs(24, 32, 5, s), 4, 16, "fa2-bf16").D for s in range(3)]
    assert result.per_sequence[4] == singles
    assert result.rows[0].value == pytest.approx(sum(singles) / 3, rel=1e-15)


def test_length_sweep(small):
    stack, _ = small
    result = length_sweep(stack, [8, 16, 32], 0, 16, "fa2-bf16", num_sequences=2, seed=0)
    assert [r.T for r in result.rows] == [8, 16, 32]
    assert all(r.metric == "D_logit" and r.value > 0 for r in result.rows)
    assert isinstance(result.monotone_increasing, bool)
    zero = length_sweep(stack, [8, 16], 5, 5, "fa2-bf16", num_sequences=1)
    assert not zero.values().any()
    exact = length_sweep(stack, [8, 64], 0, 16, "exact", num_sequences=1)
    assert all(v <= 1e-6 for v in exact.values())
    with pytest.raises(ValueError):
        length_sweep(stack, [16, 8])


def test_csv_and_json_are_reproducible(small):
    stack, _ = small
    texts = []
    for _ in range(2):
        result = shift_sweep(stack, [0, 2], 16, "fa2-bf16", num_sequences=1, T=16, seed=1)
        buf = io.StringIO()
        write_csv(result.rows, buf)
        texts.append((buf.getvalue(), sweep_json(result)))
    assert texts[0] == texts[1]
    lines = texts[0][0].splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert len(lines) == 3 and lines[1].startswith("0,16,16,fa2-bf16,1,D,")


def test_report_json(small):
    stack, X = small
    obj = score_diff_D(stack, X, 0, 2, "f32").to_json()
    assert set(obj) == {"D", "per_token", "per_layer_head", "metadata"}
    assert obj["metadata"] == {"policy": "f32", "delta1": 0, "delta2": 2, "T": 48}
