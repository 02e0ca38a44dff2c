import numpy as np
import pytest

from privtrack import autodiff as ad
from privtrack.autodiff import ShapeError
from privtrack.gradcheck import check_policy
from privtrack.params import make_rng
from privtrack.policy import (Arch, ConfigError, EmbedVariant, Policy, PolicyConfig, PolicyInput, PtInput,
                              StripError, sidecar_path)

SMALL = dict(d=16, H=3, Np=5, n_heads=2, n_layers=2)


def cfg(**kw):
    return PolicyConfig(**{**SMALL, **kw})


def random_input(c, B=3, seed=0, N=None):
    r = np.random.default_rng(seed)
    pts = r.standard_normal((B, c.Np if N is None else N, 3)) * 0.2
    return PolicyInput(r.standard_normal((B, c.scene_dim)), r.standard_normal((B, c.proprio_dim)),
                       r.integers(0, c.n_tasks, B), pts, pts)


def randomize(policy, seed=1):
    r = np.random.default_rng(seed)
    for p in policy.params.params.values():
        p.data = r.standard_normal(p.shape) * 0.3
    return policy


def test_config_validation():
    with pytest.raises(ConfigError, match="expert"):
        cfg(arch="oft", embed_variant="point_expert")
    cfg(arch="oft", embed_variant="point_expert", head_enabled=False)
    with pytest.raises(ConfigError, match="divisible"):
        cfg(d=10, n_heads=4)
    with pytest.raises(ConfigError, match="unknown"):
        PolicyConfig.from_dict({"arch": "oft", "width": 3})
    with pytest.raises(ConfigError):
        cfg(arch="transformer")
    c = cfg(arch="expert", embed_variant="backbone_query")
    assert PolicyConfig.from_dict(c.to_dict()) == c


def test_oft_zero_init_gives_bias_repeated():
    p = Policy(cfg(arch="oft"))
    bias = np.array([0.1, -0.2, 0.3, 0.4])
    p.params["act.fc2.b"].data = bias.copy()
    inp = random_input(p.config)
    z, a = p.forward_oft(inp)
    assert z.shape == (3, 3, 16) and a.shape == (3, 3, 4)
    assert np.array_equal(a.data, np.broadcast_to(bias, (3, 3, 4)))


def test_oft_actions_do_not_depend_on_head():
    with_head = randomize(Policy(cfg(arch="oft")))
    without = with_head.strip_head()
    inp = random_input(with_head.config)
    a = with_head.act(inp)
    assert np.array_equal(a, without.act(inp))
    for name in with_head.head_parameter_names():
        with_head.params[name].data = with_head.params[name].data + 1.0
    inp.head_points = inp.head_points + 5.0
    assert np.array_equal(a, with_head.act(inp))


def test_input_dimension_mismatch():
    p = Policy(cfg(arch="oft"))
    inp = random_input(p.config)
    inp.scene = inp.scene[:, :8]
    with pytest.raises(ShapeError, match="scene"):
        p.forward_oft(inp)


@pytest.mark.parametrize("variant", list(EmbedVariant))
def test_expert_shapes_and_embedding_shapes(variant):
    p = randomize(Policy(cfg(arch="expert", embed_variant=variant)))
    inp = random_input(p.config)
    noisy = np.random.default_rng(2).standard_normal((3, 3, 4))
    v = p.forward_expert(inp, noisy, 0.3)
    assert v.shape == (3, 3, 4)
    prefix = p.encode_prefix(inp)
    _, ekv = p._expert_pass(inp, noisy, np.full(3, 0.3), prefix[1])
    assert p.embed_queries(prefix, ekv).shape == (3, 3, 16)


def test_flow_time_out_of_range():
    p = Policy(cfg(arch="expert"))
    inp = random_input(p.config)
    with pytest.raises(ValueError, match=r"\[0, 1\]"):
        p.forward_expert(inp, np.zeros((3, 3, 4)), 1.5)


@pytest.mark.parametrize("arch", ["oft", "expert"])
@pytest.mark.parametrize("pt_input", ["head_only", "backbone_token", "none"])
def test_prefix_is_bitwise_isolated_from_action_tokens(arch, pt_input):
    p = randomize(Policy(cfg(arch=arch, head_pt_input=pt_input)))
    inp = random_input(p.config)
    alone, _ = p.encode_prefix(inp)
    # rebuilding with action-side work in the same process must not change the prefix
    if arch == "oft":
        p.forward_oft(inp)
    else:
        p.forward_expert(inp, np.random.default_rng(3).standard_normal((3, 3, 4)), 0.7)
    again, _ = p.encode_prefix(inp)
    assert np.array_equal(alone.data, again.data)


def _explicit_mask_oft(p, inp):
    """Reference: one sequence [prefix, queries] through the shared backbone with a block mask."""
    c = p.config
    prefix = p.prefix_tokens(inp)
    queries = ad.broadcast_to(p.params["bb.query"], (len(inp), c.H, c.d))
    x = ad.concat([prefix, queries], axis=1)
    n_pre, n = prefix.shape[1], prefix.shape[1] + c.H
    mask = np.zeros((n, n), dtype=bool)
    mask[:n_pre, :n_pre] = True
    mask[n_pre:, :] = True
    d = c.d
    for i in range(c.n_layers):
        pre = f"bb.l{i}"
        qkv = p._dense_apply(f"{pre}.qkv", p._ln(f"{pre}.ln1", x))
        q, k, v = (p._split_heads(ad.getitem(qkv, (Ellipsis, slice(j * d, (j + 1) * d)))) for j in range(3))
        x = x + p._dense_apply(f"{pre}.o", p._merge_heads(ad.attention(q, k, v, mask)))
        x = x + p._dense_apply(f"{pre}.fc2", ad.gelu(p._dense_apply(f"{pre}.fc1", p._ln(f"{pre}.ln2", x))))
    return x.data[:, :n_pre], p._ln("bb.ln_f", ad.getitem(x, (slice(None), slice(n_pre, None)))).data


@pytest.mark.parametrize("pt_input", ["head_only", "backbone_token"])
def test_grouped_attention_matches_explicit_block_mask(pt_input):
    p = randomize(Policy(cfg(arch="oft", head_pt_input=pt_input)))
    inp = random_input(p.config)
    ref_prefix, ref_z = _explicit_mask_oft(p, inp)
    states, _ = p.encode_prefix(inp)
    z, _ = p.forward_oft(inp)
    assert np.abs(states.data - ref_prefix).max() <= 1e-12
    assert np.abs(z.data - ref_z).max() <= 1e-12


def test_backbone_query_masked_does_not_change_prefix_or_see_actions():
    p = randomize(Policy(cfg(arch="expert", embed_variant="backbone_query")))
    inp = random_input(p.config)
    prefix = p.encode_prefix(inp)
    z1 = p.embed_queries(prefix).data
    _, ekv = p._expert_pass(inp, np.ones((3, 3, 4)), np.full(3, 0.5), prefix[1])
    assert np.array_equal(z1, p.embed_queries(prefix, ekv).data)
    assert np.array_equal(prefix[0].data, p.encode_prefix(inp)[0].data)


def test_attend_action_variant_reads_action_tokens():
    p = randomize(Policy(cfg(arch="expert", embed_variant="backbone_query_attend_action")))
    inp = random_input(p.config)
    prefix = p.encode_prefix(inp)
    zs = []
    for val in (0.0, 1.0):
        _, ekv = p._expert_pass(inp, np.full((3, 3, 4), val), np.full(3, 0.5), prefix[1])
        zs.append(p.embed_queries(prefix, ekv).data)
    assert not np.array_equal(zs[0], zs[1])
    with pytest.raises(ValueError, match="expert keys"):
        p.embed_queries(prefix)


def test_cross_attn_embedding_ignores_actions():
    p = randomize(Policy(cfg(arch="expert")))
    inp = random_input(p.config)
    r = np.random.default_rng(0)
    _, _, t1 = p.forward_train(inp, r.standard_normal((3, 3, 4)), make_rng(0))
    _, _, t2 = p.forward_train(inp, r.standard_normal((3, 3, 4)), make_rng(1))
    assert np.array_equal(t1.data, t2.data)


def test_embed_queries_rejects_oft():
    p = Policy(cfg(arch="oft"))
    with pytest.raises(ConfigError):
        p.embed_queries(p.encode_prefix(random_input(p.config)))


def test_sampler_closed_forms():
    p = Policy(cfg(arch="expert"))
    inp = random_input(p.config, B=2)
    c = np.array([0.5, -1.0, 2.0, 0.0])
    eps = make_rng(4).standard_normal((2, 3, 4))
    out = p.sample_actions_fm(inp, 7, make_rng(4), velocity=lambda x, s: np.broadcast_to(c, x.shape))
    assert np.abs(out - (eps + c)).max() <= 1e-12
    one = p.sample_actions_fm(inp, 1, None, velocity=lambda x, s: np.sin(x) + s, x0=eps)
    assert np.array_equal(one, eps + (np.sin(eps) + 0.0))
    with pytest.raises(ValueError, match="n_steps"):
        p.sample_actions_fm(inp, 0, make_rng(0))


def test_sampler_is_deterministic_for_a_seed():
    p = randomize(Policy(cfg(arch="expert")))
    inp = random_input(p.config, B=2)
    a = p.act(inp, make_rng(9), flow_steps=3)
    assert np.array_equal(a, p.act(inp, make_rng(9), flow_steps=3))
    assert np.array_equal(a, p.strip_head().act(inp, make_rng(9), flow_steps=3))


@pytest.mark.parametrize("sup", ["full3d", "goal_only", "track2d"])
@pytest.mark.parametrize("pt_input", ["head_only", "none"])
def test_factored_fusion_matches_broadcast_concat(sup, pt_input):
    p = randomize(Policy(cfg(arch="oft", supervision=sup, head_pt_input=pt_input)))
    z = np.random.default_rng(5).standard_normal((2, 3, 16))
    pts = np.random.default_rng(6).standard_normal((2, 5, 3)) * 0.2
    a = p.predict_tracks(z, pts).data
    b = p.predict_tracks_reference(z, pts).data
    out = 2 if sup == "track2d" else 3
    assert a.shape == ((2, 5, out) if sup == "goal_only" else (2, 3, 5, out))
    assert np.abs(a - b).max() <= 1e-12


def test_single_point_single_step_is_one_mlp_evaluation():
    p = randomize(Policy(cfg(arch="oft", H=1, Np=1)))
    z = np.random.default_rng(7).standard_normal((1, 1, 16))
    pt = np.array([[[0.1, -0.2, 0.05]]])
    out = p.predict_tracks(z, pt).data
    assert out.shape == (1, 1, 1, 3)
    prm = {k: v.data for k, v in p.params.params.items()}
    gelu = lambda x: 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))  # noqa: E731
    e = gelu(10.0 * pt[0, 0] @ prm["pt_head.pm1.w"] + prm["pt_head.pm1.b"]) @ prm["pt_head.pm2.w"] + prm["pt_head.pm2.b"]
    h = gelu(np.concatenate([z[0, 0], e]) @ prm["pt_head.f1.w"] + prm["pt_head.f1.b"])
    assert np.abs(out[0, 0, 0] - (h @ prm["pt_head.f2.w"] + prm["pt_head.f2.b"])).max() <= 1e-12


def test_point_permutation_is_bitwise():
    p = randomize(Policy(cfg(arch="oft", Np=64)))
    r = np.random.default_rng(8)
    z = r.standard_normal((2, 3, 16))
    pts = r.standard_normal((2, 64, 3)) * 0.2
    base = p.predict_tracks(z, pts).data
    for _ in range(5):
        perm = r.permutation(64)
        assert np.array_equal(p.predict_tracks(z, pts[:, perm]).data, base[:, :, perm])


def test_track_width_mismatch():
    p = Policy(cfg(arch="oft"))
    with pytest.raises(ShapeError, match="expected"):
        p.predict_tracks(np.zeros((1, 3, 8)), np.zeros((1, 5, 3)))


@pytest.mark.parametrize("arch, variant", [("oft", "cross_attn")] + [("expert", v.value) for v in EmbedVariant])
def test_strip_matches_head_disabled_config(arch, variant):
    p = Policy(cfg(arch=arch, embed_variant=variant))
    stripped = p.strip_head()
    assert not any(n.startswith(("pt_head.", "pt_embed.")) for n in stripped.params.names())
    assert stripped.num_parameters() == Policy(cfg(arch=arch, head_enabled=False)).num_parameters()
    assert stripped.params.names() == Policy(cfg(arch=arch, head_enabled=False)).params.names()


def test_strip_refuses_backbone_token():
    with pytest.raises(StripError, match="backbone"):
        Policy(cfg(arch="oft", head_pt_input="backbone_token")).strip_head()


def test_default_parameter_counts():
    # fixes the head's footprint at the default width so accidental growth is caught
    full = Policy(PolicyConfig(arch="oft", Np=64))
    assert full.num_parameters() - full.strip_head().num_parameters() == 3 * 64 + 64 + 64 * 64 + 64 + 128 * 128 + 128 + 128 * 3 + 3


def test_save_load_round_trip(tmp_path):
    p = randomize(Policy(cfg(arch="expert", embed_variant="point_expert")))
    p.save(tmp_path / "m.p4rk")
    assert sidecar_path(tmp_path / "m.p4rk").exists()
    q = Policy.load(tmp_path / "m.p4rk")
    assert q.config == p.config
    inp = random_input(p.config)
    assert np.array_equal(q.act(inp, make_rng(0), 2), p.act(inp, make_rng(0), 2))


def test_detach_head_blocks_head_gradient_into_backbone():
    p = randomize(Policy(cfg(arch="oft")))
    inp = random_input(p.config)
    _, _, tracks = p.forward_train(inp, np.zeros((3, 3, 4)), detach_head=True)
    p.params.zero_grad()
    ad.backward(ad.mean(tracks * tracks))
    assert all(p.params[n].grad is None for n in p.params.names() if n.startswith("bb."))
    assert p.params["pt_head.f1.w"].grad is not None


def test_track_loss_never_reaches_action_head():
    p = randomize(Policy(cfg(arch="oft")))
    inp = random_input(p.config)
    _, _, tracks = p.forward_train(inp, np.zeros((3, 3, 4)))
    p.params.zero_grad()
    ad.backward(ad.mean(tracks * tracks))
    assert p.params["act.fc1.w"].grad is None and p.params["act.fc2.w"].grad is None
    assert p.params["bb.l0.qkv.w"].grad is not None


@pytest.mark.parametrize("arch", list(Arch))
def test_policy_gradients_small_sample(arch):
    rng = make_rng(123, arch.value)
    assert max(check_policy(arch, i, rng) for i in range(6)) <= 1e-5
