import json

import numpy as np
import pytest

from privtrack import autodiff as ad
from privtrack.datasets import generate
from privtrack.params import make_rng
from privtrack.policy import ConfigError, Policy, PolicyInput
from privtrack.supervision import SupervisionVariant, stack_windows
from privtrack.trainer import (LOG_COLUMNS, TrainConfig, TrainingError, combined_loss, read_log, train,
                               validation_losses)

H, NP = 4, 12
POLICY = {"d": 16, "n_heads": 2, "n_layers": 1}


@pytest.fixture(scope="module")
def dataset():
    return generate(["drawer", "door"], 6, NP, seed=2)


def config(**kw):
    base = dict(policy=dict(POLICY, arch="oft"), Np=NP, H=H, batch_size=8, steps=4, log_interval=2, seed=0)
    base.update(kw)
    if "arch" in kw:
        base["policy"] = dict(POLICY, arch=base.pop("arch"))
    return TrainConfig(**base)


def batch_for(cfg, dataset, n=8):
    b = stack_windows(dataset.episodes, cfg.H, SupervisionVariant(cfg.variant))
    return b.take(np.arange(n) * 3)


def randomized_policy(cfg, seed=0):
    p = Policy(cfg.policy_config(NP))
    r = np.random.default_rng(seed)
    for prm in p.params.params.values():
        prm.data = r.standard_normal(prm.shape) * 0.3
    return p


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError, match="omega"):
        config(omega_pt=-1.0)
    with pytest.raises(ConfigError, match="may not set"):
        TrainConfig(policy={"H": 3})
    with pytest.raises(ConfigError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 0.1})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(config().to_dict()))
    assert TrainConfig.from_json(path) == config()


@pytest.mark.parametrize("arch", ["oft", "expert"])
def test_zero_weight_matches_head_disabled_gradients(arch, dataset):
    cfg = config(arch=arch)
    batch = batch_for(cfg, dataset)
    full = randomized_policy(cfg)
    terms = combined_loss(full, batch, 0.0, make_rng(1))
    assert terms.total.item() == terms.act.item()
    ad.backward(terms.total)
    base_cfg = config(policy=dict(POLICY, arch=arch, head_enabled=False))
    base = Policy(base_cfg.policy_config(NP))
    for name in base.params.names():
        base.params[name].data = full.params[name].data.copy()
    ad.backward(combined_loss(base, batch, 0.0, make_rng(1)).total)
    for name in base.params.names():
        gb, gf = base.params[name].grad, full.params[name].grad
        if gb is None:  # unread final-layer block in the expert baseline; the head's zero-weight path gives 0
            assert not gf.any()
            continue
        assert np.abs(gb - gf).max() <= 1e-12


def test_perfect_prediction_has_zero_loss(dataset):
    cfg = config()
    batch = batch_for(cfg, dataset)
    p = randomized_policy(cfg)
    with ad.no_grad():
        pred, _, tracks = p.forward_train(PolicyInput.from_batch(batch), batch.actions)
    batch.actions, batch.target = pred.data, tracks.data
    terms = combined_loss(p, batch, 1.0)
    assert terms.total.item() == 0.0


@pytest.mark.parametrize("arch", ["oft", "expert"])
def test_loss_decomposition_recompute(arch, dataset):
    cfg = config(arch=arch)
    batch = batch_for(cfg, dataset)
    p = randomized_policy(cfg)
    one = combined_loss(p, batch, 1.0, make_rng(5))
    ten = combined_loss(p, batch, 10.0, make_rng(5))
    assert abs(ten.total.item() - (one.act.item() + 10.0 * one.pt.item())) <= 1e-12
    with ad.no_grad():
        pred, target, tracks = p.forward_train(PolicyInput.from_batch(batch), batch.actions, make_rng(5))
    act = np.abs(pred.data - target).mean() if arch == "oft" else ((pred.data - target) ** 2).mean()
    assert abs(one.act.item() - act) <= 1e-12
    assert abs(one.pt.item() - np.abs(tracks.data - batch.target).mean()) <= 1e-12


def test_flow_target_is_action_minus_noise(dataset):
    cfg = config(arch="expert")
    batch = batch_for(cfg, dataset, 4)
    p = randomized_policy(cfg)
    rng = make_rng(8)
    _, target, _ = p.forward_train(PolicyInput.from_batch(batch), batch.actions, rng)
    eps = make_rng(8).standard_normal(batch.actions.shape)
    assert np.array_equal(target, batch.actions - eps)


def test_head_mismatch_is_reported(dataset):
    cfg = config()
    batch = batch_for(config(variant="goal_only"), dataset)
    with pytest.raises(ConfigError, match="target"):
        combined_loss(randomized_policy(cfg), batch, 1.0)


def test_zero_learning_rate_keeps_parameters(dataset):
    result = train(config(lr=0.0, steps=2), dataset)
    init = Policy(config().policy_config(NP))
    for name in init.params.names():
        assert np.array_equal(result.policy.params[name].data, init.params[name].data)


def test_training_is_deterministic(tmp_path, dataset):
    a = train(config(out_dir=str(tmp_path / "a"), record_wall_time=False, arch="expert"), dataset)
    train(config(out_dir=str(tmp_path / "b"), record_wall_time=False, arch="expert"), dataset)
    for f in ("policy.p4rk", "train_log.csv", "validation.csv", "policy.p4rk.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    rows = read_log(tmp_path / "a" / "train_log.csv")
    assert [r["step"] for r in rows] == [0, 2]
    assert list(rows[0]) == LOG_COLUMNS
    for r in rows:
        assert abs(r["loss_total"] - (r["loss_act"] + r["loss_pt"])) <= 1e-12
    assert a.final_validation["step"] == 4


def test_zero_weight_run_equals_detached_run(dataset):
    a = train(config(omega_pt=0.0, steps=6), dataset)
    b = train(config(omega_pt=0.0, steps=6, detach_head=True), dataset)
    for name in a.policy.params.names():
        assert np.abs(a.policy.params[name].data - b.policy.params[name].data).max() <= 1e-12


def test_checkpoints_and_np_mismatch(tmp_path, dataset):
    train(config(out_dir=str(tmp_path), checkpoint_interval=2), dataset)
    assert sorted(p.name for p in tmp_path.glob("checkpoint_*.p4rk")) == ["checkpoint_000002.p4rk",
                                                                          "checkpoint_000004.p4rk"]
    with pytest.raises(ConfigError, match="Np"):
        train(config(Np=NP + 1), dataset)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_aborts_with_step(dataset):
    import copy
    bad = copy.deepcopy(dataset)
    for ep in bad.episodes:
        ep.scene_features = ep.scene_features * 1e308
    with pytest.raises(TrainingError, match="step 0"):
        train(config(), bad)


@pytest.mark.parametrize("variant", ["cross_attn", "point_expert", "backbone_query", "backbone_query_attend_action"])
@pytest.mark.parametrize("head", [True, False])
def test_expert_trains_with_every_embedding_variant(variant, head, dataset):
    cfg = config(steps=2, policy=dict(POLICY, arch="expert", embed_variant=variant, head_enabled=head))
    assert len(train(cfg, dataset).validation) == 2


def test_eval_callback_fills_eval_sr(dataset):
    seen = []
    res = train(config(eval_interval=2), dataset, on_eval=lambda p, s: seen.append(s) or 0.5)
    assert seen == [0, 2] and [r["eval_sr"] for r in res.log] == [0.5, 0.5]


def test_validation_losses_are_repeatable(dataset):
    cfg = config(arch="expert")
    p = randomized_policy(cfg)
    b = batch_for(cfg, dataset, 20)
    assert validation_losses(p, b, 0, chunk=7) == validation_losses(p, b, 0, chunk=7)
