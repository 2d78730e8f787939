import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from pamlora.alignment import (AlignmentConfig, AlignmentHook, compute_important_set,
                               find_misaligned, pam_hook, realign, sign_conflict_rate)
from pamlora.errors import ContractError
from pamlora.model import LoraAdapter, unflatten_adapter

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def flat_adapter(values):
    """Single-layer adapter whose flat vector is exactly ``values`` (length 4)."""
    return unflatten_adapter(np.asarray(values, dtype=float), ((2, 1, 1),)) if len(values) == 3 \
        else unflatten_adapter(np.asarray(values, dtype=float), ((2, 2, 1),))


def test_important_set_examples():
    th = compute_important_set([0.5, -0.3, 0.1, 0.2], 50)
    assert th.k == 2 and th.important_set == {0, 1} and th.tau == 0.3
    assert compute_important_set([0.5, -0.3, 0.1, 0.2], 100).important_set == {0, 1, 2, 3}
    th0 = compute_important_set([0.5, -0.3, 0.1, 0.2], 0)
    assert th0.important_set == frozenset() and th0.k == 0 and math.isinf(th0.tau)
    assert compute_important_set([0.2, -0.2, 0.2], 34).important_set == {0, 1}


def test_important_set_errors():
    with pytest.raises(ContractError):
        compute_important_set([], 50)
    with pytest.raises(ContractError):
        compute_important_set([1.0], 101)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, st.integers(1, 40), elements=finite), st.floats(0, 100))
def test_important_set_size_and_ordering(g, p):
    th = compute_important_set(g, p)
    assert th.k == len(th.indices) == math.ceil(round(p / 100 * g.size, 9))
    inside = np.abs(g[th.mask])
    outside = np.abs(g[~th.mask])
    if inside.size and outside.size:
        assert inside.min() >= outside.max()
        # ties at the cut go to lower indices
        cut = inside.min()
        tied_in = np.flatnonzero(th.mask & (np.abs(g) == cut))
        tied_out = np.flatnonzero(~th.mask & (np.abs(g) == cut))
        if tied_in.size and tied_out.size:
            assert tied_in.max() < tied_out.min()


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.integers(1, 30), elements=finite), st.floats(0, 100), st.floats(0, 100))
def test_important_set_monotone_in_p(g, p1, p2):
    lo, hi = sorted([p1, p2])
    assert compute_important_set(g, lo).important_set <= compute_important_set(g, hi).important_set


def test_find_misaligned_examples():
    g = np.array([0.5, -0.3, 0.1])
    th = compute_important_set(g, 50)   # k=2 -> {0, 1}
    assert find_misaligned([-0.2, -0.4, -0.1], g, th).tolist() == [0]
    assert find_misaligned([0.1, -0.1, 0.3], g, th).tolist() == []
    assert find_misaligned([0.0, 0.4, 0.3], g, th).tolist() == [1]
    with pytest.raises(ContractError):
        find_misaligned([1.0], g, th)


def test_realign_examples():
    g = flat_adapter([0.5, -0.3, 0.1])
    cur = flat_adapter([-0.2, -0.4, -0.1])
    assert realign(cur, g, [0], "global") == 1
    assert cur.flatten().tolist() == [0.5, -0.4, -0.1]
    cur = flat_adapter([-0.2, -0.4, -0.1])
    realign(cur, g, [0], "zero")
    assert cur.flatten().tolist() == [0.0, -0.4, -0.1]
    before = flat_adapter([-0.2, -0.4, -0.1])
    cur = before.copy()
    assert realign(cur, g, [], "global") == 0
    assert cur.flatten().tobytes() == before.flatten().tobytes()


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0, 100), st.sampled_from(["global", "zero"]))
def test_no_misalignment_after_realign(seed, p, mode):
    rng = np.random.default_rng(seed)
    layout = ((3, 4, 2),)
    g = unflatten_adapter(rng.normal(size=14), layout)
    cur = unflatten_adapter(rng.normal(size=14), layout)
    th = compute_important_set(g.flatten(), p)
    realign(cur, g, find_misaligned(cur.flatten(), g.flatten(), th), mode)
    assert find_misaligned(cur.flatten(), g.flatten(), th).size == 0


def test_threshold_ignores_current_values():
    g = np.array([0.4, -0.1, 0.3, 0.05])
    a = compute_important_set(g, 50)
    hook_a = AlignmentHook(AlignmentConfig(p=50, s=1), unflatten_adapter(g, ((2, 2, 1),)))
    assert hook_a.threshold.important_set == a.important_set == {0, 2}


def test_pam_hook_schedule():
    g = flat_adapter([0.5, -0.3, 0.1, 0.2])
    cfg = AlignmentConfig(p=50, s=100)
    cur = flat_adapter([-0.5, -0.3, 0.1, 0.2])
    assert pam_hook(99, cfg, cur, g) == 0
    assert cur.flatten()[0] == -0.5
    assert pam_hook(100, cfg, cur, g) == 1
    assert cur.flatten()[0] == 0.5
    with pytest.raises(ContractError):
        pam_hook(0, cfg, cur, g)


def test_pam_hook_p_zero_is_noop():
    g = flat_adapter([0.5, -0.3, 0.1, 0.2])
    cur = flat_adapter([-0.5, 0.3, -0.1, -0.2])
    before = cur.flatten().tobytes()
    assert pam_hook(100, AlignmentConfig(p=0, s=100), cur, g) == 0
    assert cur.flatten().tobytes() == before


def test_per_layer_ranking():
    layout = ((1, 1, 1), (1, 1, 1))
    g = np.array([10.0, 9.0, 0.2, 0.1])
    th = compute_important_set(g, 50, layout)
    assert th.important_set == {0, 2}
    assert compute_important_set(g, 50).important_set == {0, 1}


def test_alignment_config_validation():
    with pytest.raises(ContractError):
        AlignmentConfig(p=120)
    with pytest.raises(ContractError):
        AlignmentConfig(s=0)
    with pytest.raises(ContractError):
        AlignmentConfig(reinit="random")


def test_sign_conflict_rate_examples():
    assert sign_conflict_rate([0.5, -0.3, 0.1, 0.0], [-0.5, -0.3, 0.2, 1.0]) == pytest.approx(1 / 3, abs=0)
    a = np.array([0.3, -1.0, 2.0])
    assert sign_conflict_rate(a, a) == 0.0
    assert sign_conflict_rate(a, -a) == 1.0
    assert sign_conflict_rate([0.0, 1.0], [1.0, 0.0]) == 0.0
    with pytest.raises(ContractError):
        sign_conflict_rate([1.0], [1.0, 2.0])


def test_hook_logs_diagnostics():
    g = flat_adapter([0.5, -0.3, 0.1, 0.2])
    hook = AlignmentHook(AlignmentConfig(p=50, s=2), g, task_index=3)
    cur = flat_adapter([-0.5, 0.3, 0.1, 0.2])
    assert hook(1, cur) == 0 and hook.diagnostics == []
    assert hook(2, cur) == 2
    assert hook.diagnostics == [(3, 2, 0.5, 2, 0)]
    assert isinstance(cur, LoraAdapter)
