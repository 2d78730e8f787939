import numpy as np
import pytest

from pamlora.errors import ContractError
from pamlora.harness import (AccuracyMatrix, all_metrics, base_model_for, evaluate, metric_acc,
                             metric_am, metric_at, metric_bwt, metric_fwt, read_matrix_csv,
                             read_metrics, recompute_metrics, run_sequence, tasks_for, write_bundle)
from pamlora.model import load_adapter, zero_adapter
from pamlora.tasks import Dataset, build

from .conftest import tiny

nan = np.nan
HAND = AccuracyMatrix(
    acc=[[0.8, 0.25, 0.1], [0.7, 0.7, 0.35], [0.6, 0.7, 0.9]],
    zero_shot=[0.1, 0.2, 0.3],
    pre_merge=[0.8, 0.7, 0.9],
)


def test_hand_matrix_metrics():
    assert abs(metric_bwt(HAND) - (-0.1)) <= 1e-12
    assert abs(metric_acc(HAND) - 0.7333333333333333) <= 1e-12
    assert abs(metric_fwt(HAND) - 0.05) <= 1e-12
    assert abs(metric_at(HAND) - 0.8) <= 1e-12
    assert abs(metric_am(HAND) - 0.8) <= 1e-12
    # printed bound: only i = 2 enters, still divided by T - 1
    assert abs(metric_fwt(HAND, paper_literal=True) - 0.025) <= 1e-12


def test_metric_degenerate_cases():
    one = AccuracyMatrix([[0.4]], zero_shot=[0.1], pre_merge=[0.4])
    assert metric_acc(one) == metric_at(one) == metric_am(one) == 0.4
    with pytest.raises(ContractError):
        metric_bwt(one)
    with pytest.raises(ContractError):
        metric_fwt(one)
    flat = AccuracyMatrix(np.full((3, 3), 0.5), np.full(3, 0.5), np.full(3, 0.5))
    assert all_metrics(flat) == {"ACC": 0.5, "BWT": 0.0, "FWT": 0.0, "A_t": 0.5, "A_m": 0.5}
    better = AccuracyMatrix([[0.5, nan], [0.9, 0.6]], [0.1, 0.2], [0.5, 0.6])
    assert metric_bwt(better) > 0
    assert abs(metric_fwt(AccuracyMatrix([[0.5, 0.3], [0.4, 0.6]], [0.0, 0.1], [0.5, 0.6])) - 0.2) < 1e-12


def test_incomplete_matrix_rejected():
    m = AccuracyMatrix.empty(2)
    with pytest.raises(ContractError):
        metric_acc(m)
    with pytest.raises(ContractError):
        AccuracyMatrix([[1.5]])
    m.acc[:] = 0.5
    with pytest.raises(ContractError):
        metric_fwt(m)  # zero-shot missing


def test_metrics_scale_linearly():
    c = 0.5
    scaled = AccuracyMatrix(HAND.acc * c, HAND.zero_shot * c, HAND.pre_merge * c)
    for k, v in all_metrics(HAND).items():
        assert abs(all_metrics(scaled)[k] - c * v) <= 1e-12


def test_evaluate_examples():
    cfg = tiny("finetune")
    base = base_model_for(cfg, 0)
    _, ev = build(tasks_for(cfg, 0)[0])
    assert evaluate(base, None, ev) == evaluate(base, None, ev)
    with pytest.raises(ContractError):
        evaluate(base, None, Dataset(np.zeros((0, 16)), np.zeros(0, int)))


def test_zero_shot_row_is_base_with_zero_adapter():
    cfg = tiny("finetune")
    res = run_sequence(cfg)
    base = base_model_for(cfg, 0)
    zero = zero_adapter(base, cfg.rank)
    for spec, z in zip(tasks_for(cfg, 0), res.matrix.zero_shot):
        assert evaluate(base, zero, build(spec)[1]) == z


def test_same_config_is_bit_identical():
    a, b = run_sequence(tiny("pam", s=5)), run_sequence(tiny("pam", s=5))
    assert a.same_as(b) and a.alignment == b.alignment


def test_single_task_pam_equals_finetune():
    cfg_p, cfg_f = tiny("pam", s=5), tiny("finetune")
    one = tasks_for(cfg_p, 0)[:1]
    a, b = run_sequence(cfg_p, tasks=one), run_sequence(cfg_f, tasks=one)
    assert a.same_as(b)


def test_pam_with_p_zero_equals_average():
    a, b = run_sequence(tiny("pam", p=0, s=3)), run_sequence(tiny("average"))
    assert a.same_as(b)


def test_pam_changes_something_when_p_positive():
    a, b = run_sequence(tiny("pam", p=100, s=1)), run_sequence(tiny("average"))
    assert sum(n for _, _, _, n, _ in a.alignment) > 0
    assert not a.same_as(b)


@pytest.mark.parametrize("method", ["finetune", "independent", "average", "ties", "tall", "magmax",
                                    "pam", "pam+lwf", "pam+er", "lwf", "er", "finetune+align"])
def test_every_method_fills_the_matrix(method):
    res = run_sequence(tiny(method))
    m = res.matrix
    assert not np.isnan(m.acc).any() and not np.isnan(m.pre_merge).any()
    assert set(res.metrics) == {"ACC", "BWT", "FWT", "A_t", "A_m"}
    merging = method in ("average", "ties", "tall", "magmax", "pam", "pam+lwf", "pam+er")
    assert len(res.merges) == (4 if merging else 0)
    if not merging:
        assert res.metrics["A_m"] == res.metrics["A_t"]


def test_bundle_roundtrip(tmp_path):
    res = run_sequence(tiny("pam", s=5))
    d = write_bundle(res, tmp_path / "b")
    assert sorted(p.name for p in d.iterdir()) == [
        "adapters", "alignment.csv", "matrix.csv", "merges.json", "metrics.json", "steps.csv"]
    back = read_matrix_csv(d / "matrix.csv")
    assert np.array_equal(back.acc, res.matrix.acc)
    stored, fresh = read_metrics(d), recompute_metrics(d)
    for k in res.metrics:
        assert abs(stored[k] - fresh[k]) <= 1e-12
    assert load_adapter(d / "adapters" / "task_05.lora") == res.adapters[-1]


def test_finetune_rows_match_checkpoints(tmp_path):
    cfg = tiny("finetune")
    res = run_sequence(cfg)
    d = write_bundle(res, tmp_path / "b")
    base = base_model_for(cfg, 0)
    evals = [build(s)[1] for s in tasks_for(cfg, 0)]
    for t in range(5):
        adapter = load_adapter(d / "adapters" / f"task_{t + 1:02d}.lora")
        assert [evaluate(base, adapter, ev) for ev in evals] == res.matrix.acc[t].tolist()


def test_orders_permute_tasks():
    cfg = tiny("finetune")
    given = run_sequence(cfg, order="given").task_ids
    srt = run_sequence(cfg, order="sorted_by_id").task_ids
    assert srt == sorted(given) and srt != given


def test_default_tasks_are_learnable_and_zero_shot_is_worse():
    from pamlora.config import config_from_dict
    res = run_sequence(config_from_dict({"method": "independent"}))
    diag = np.diag(res.matrix.acc)
    assert np.all(diag >= 0.9), diag
    assert np.all(res.matrix.zero_shot < diag)
