import math

import numpy as np
import pytest

from privtrack.evaluation import (AblationError, AblationSpec, Axis, ConstantPolicy, PolicyAgent, RESULT_COLUMNS,
                                  ScriptedPolicy, cell_config, compare, read_results, rollout, rollout_many,
                                  run_ablation, success_rate, summarize, trial_seeds, validate_results,
                                  write_results)
from privtrack.policy import Policy, PolicyConfig

TINY_TRAIN = {"policy": {"d": 8, "n_heads": 2, "n_layers": 1}, "H": 2, "steps": 2, "batch_size": 4,
              "log_interval": 1, "val_windows": 8}


def tiny_spec(**kw):
    base = dict(axis="weight", values=[1.0], seeds=[0], tasks=["drawer"], train=TINY_TRAIN, episodes=2, Np=8,
                trials=2, max_steps=5)
    base.update(kw)
    return AblationSpec(**base)


@pytest.mark.parametrize("task", ["drawer", "door", "pick_place"])
def test_scripted_policy_always_succeeds(task):
    k, n = success_rate(ScriptedPolicy(), task, seed=0, trials=10)
    assert (k, n) == (10, 10)


def test_zero_policy_fails_on_drawer():
    res = rollout(ConstantPolicy(), "drawer", 3, max_steps=50)
    assert not res.success and res.steps == 50
    assert np.array_equal(res.gripper[0], res.gripper[-1])


def test_rollouts_are_deterministic():
    p = Policy(PolicyConfig(arch="expert", d=8, n_heads=2, n_layers=1, H=3, Np=4, head_enabled=False))
    agent = PolicyAgent(p, flow_steps=2)
    a = rollout_many(agent, "door", [1, 2], max_steps=9)
    b = rollout_many(agent, "door", [1, 2], max_steps=9)
    for x, y in zip(a, b):
        assert x.actions.tobytes() == y.actions.tobytes() and x.gripper.tobytes() == y.gripper.tobytes()
    # full chunks are executed: 3 chunks of 3 actions
    assert all(r.steps == 9 for r in a)


def test_batched_rollouts_match_single_rollouts():
    p = Policy(PolicyConfig(arch="expert", d=8, n_heads=2, n_layers=1, H=2, Np=4, head_enabled=False))
    agent = PolicyAgent(p, flow_steps=2)
    many = rollout_many(agent, "drawer", [4, 5], max_steps=6)
    one = rollout(agent, "drawer", 5, max_steps=6)
    assert np.array_equal(many[1].actions, one.actions)


def test_non_finite_action_is_a_diagnosed_failure():
    res = rollout(ConstantPolicy((np.nan, 0.0, 0.0, 1.0)), "drawer", 0, max_steps=10)
    assert not res.success and "non-finite" in res.diagnostic


def test_backbone_token_agent_supplies_points():
    p = Policy(PolicyConfig(arch="oft", d=8, n_heads=2, n_layers=1, H=2, Np=6, head_pt_input="backbone_token",
                            head_enabled=False))
    res = rollout(PolicyAgent(p), "pick_place", 0, max_steps=4)
    assert res.steps == 4


def test_trial_seeds_are_stable():
    assert trial_seeds(0, 5) == trial_seeds(0, 5)
    assert trial_seeds(0, 5)[:3] == trial_seeds(0, 3)


def test_spec_validation():
    with pytest.raises(AblationError, match="unknown"):
        AblationSpec(axis="supervision", values=["depth"])
    with pytest.raises(AblationError):
        AblationSpec(axis="weight", values=[-1.0])
    with pytest.raises(AblationError, match="seed"):
        AblationSpec(axis="weight", seeds=[])
    with pytest.raises(ValueError):
        AblationSpec(axis="learning_rate")
    assert AblationSpec(axis="weight").values == [0.1, 1.0, 10.0]
    assert AblationSpec(axis="point_count").values == [256, 512, 1024]


def test_cell_config_mapping():
    spec = tiny_spec(axis="pt_input", values=["baseline", "pt_backbone", "pt_backbone_track", "no_pt"])
    assert not cell_config(spec, "baseline", 0).policy["head_enabled"]
    c = cell_config(spec, "pt_backbone", 0).policy
    assert c["head_pt_input"] == "backbone_token" and not c["head_enabled"]
    c = cell_config(spec, "pt_backbone_track", 0).policy
    assert c["head_pt_input"] == "backbone_token" and c["head_enabled"]
    assert cell_config(spec, "no_pt", 3).seed == 3
    assert cell_config(tiny_spec(axis="embed_variant", values=["point_expert"]), "point_expert", 0).policy["arch"] == "expert"
    assert cell_config(tiny_spec(axis="point_count", values=[16]), 16, 0).Np == 16
    assert cell_config(tiny_spec(values=[10.0]), 10.0, 0).omega_pt == 10.0


def test_single_cell_gives_one_data_and_one_summary_row():
    rows = run_ablation(tiny_spec())
    assert [r["row_type"] for r in rows] == ["data", "summary"]
    validate_results(rows)


def test_weight_axis_row_count():
    spec = tiny_spec(values=[0.1, 1.0, 10.0], seeds=[0, 1], tasks=["drawer", "door"])
    rows = run_ablation(spec)
    data = [r for r in rows if r["row_type"] == "data"]
    assert len(data) == 3 * 2 * 2
    assert len([r for r in rows if r["row_type"] == "summary"]) == 3 * 2


def test_failing_cell_becomes_error_row():
    spec = tiny_spec(axis="point_count", values=[8, 1_000_000_000])
    spec.datasets = {1_000_000_000: "/nonexistent/file.p4rd"}
    rows = run_ablation(spec)
    kinds = [r["row_type"] for r in rows]
    assert kinds.count("error") == 1 and kinds.count("data") == 1
    validate_results(rows)


def test_csv_round_trip_and_recomputed_summaries(tmp_path):
    rows = run_ablation(tiny_spec(values=[0.1, 1.0], seeds=[0, 1]))
    write_results(tmp_path / "r.csv", rows)
    back = read_results(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[0] == ",".join(RESULT_COLUMNS)
    for a, b in zip(rows, back):
        for k in RESULT_COLUMNS:
            va, vb = a.get(k), b.get(k)
            assert (va is None and vb is None) or va == vb or (isinstance(va, float) and math.isnan(va) and vb is None)
    recomputed = summarize([r for r in back if r["row_type"] == "data"])
    stored = [r for r in back if r["row_type"] == "summary"]
    for x, y in zip(recomputed, stored):
        assert abs(x["success_rate"] - y["success_rate"]) <= 1e-12
        assert abs(x["success_rate_std"] - y["success_rate_std"]) <= 1e-12


def test_validate_results_catches_inconsistency():
    row = {"row_type": "data", "successes": 3, "trials": 4, "success_rate": 0.5, "error": None}
    with pytest.raises(AblationError, match="disagrees"):
        validate_results([row])
    with pytest.raises(AblationError, match="out of range"):
        validate_results([{**row, "successes": 5}])


def _data(value, rates):
    return [{"row_type": "data", "axis": "supervision", "value": value, "seed": i, "task": "drawer",
             "success_rate": r} for i, r in enumerate(rates)]


def test_compare_effect_size():
    rows = _data("baseline", [0.2, 0.4, 0.3]) + _data("full3d", [0.5, 0.7, 0.6])
    (c,) = compare(rows)
    assert c.direction == "higher" and abs(c.diff - 0.3) <= 1e-12
    # pooled sample std of both groups is 0.1
    assert abs(c.cohens_d - 3.0) <= 1e-9
    assert "Cohen's d +3.000" in c.describe()
    (same,) = compare(_data("baseline", [0.5, 0.5]) + _data("full3d", [0.5, 0.5]))
    assert same.direction == "equal" and same.cohens_d == 0.0


def test_axis_values_cover_all_axes():
    assert {a.value for a in Axis} == {"supervision", "pt_input", "embed_variant", "weight", "point_count"}
