import os

import numpy as np
import pytest

from streetnav import tensor as T
from streetnav.agent import (
    AgentConfig,
    AgentModel,
    START_ACTION_ID,
    act_greedy,
    pad_tokens,
    prepare_episode,
    rollout_batch,
    teacher_forced_loss,
)
from streetnav.bpe import train_bpe
from streetnav.env import Action
from streetnav.errors import ConfigError, DataError
from streetnav.gradcheck import grad_check
from streetnav.worldgen import WorldSpec, gen_instances, gen_world


@pytest.fixture(scope="module")
def world():
    return gen_world(WorldSpec(grid_width=6, grid_height=6, seed=21, prefinal_dim=12,
                               fourth_width=156, fourth_channels=1))


@pytest.fixture(scope="module")
def instances(world):
    return gen_instances(world, "map2seq", 6, seed=1, min_len=6, max_len=10)


@pytest.fixture(scope="module")
def bpe(instances):
    return train_bpe([i.instruction for i in instances], vocab_size=300)


def tiny_config(bpe, **overrides):
    base = dict(
        vocab_size=bpe.vocab_size,
        token_emb_dim=6,
        encoder_hidden=5,
        encoder_layers=2,
        decoder_hidden=8,
        attention_heads=2,
        action_emb_dim=4,
        junction_emb_dim=3,
        timestep_emb_dim=4,
        visual_ffn_widths=(7, 6),
        dropout=0.0,
        attention_dropout=0.0,
        visual_variant="prefinal",
        max_steps=40,
    )
    base.update(overrides)
    return AgentConfig(**base)


def build(world, bpe, seed=0, **overrides):
    return AgentModel(tiny_config(bpe, **overrides), world.stores, np.random.default_rng(seed))


def episodes_for(world, model, instances):
    variants = [v for v in {model.config.visual_variant, model.config.first_variant}
                if v != "none"]
    return [prepare_episode(world.graph, world.stores, i, variants) for i in instances]


def test_encode_shapes_single_token(world, bpe):
    model = build(world, bpe)
    w, mask, init_cell = model.encode(np.array([[1]]), np.array([1]))
    assert w.shape == (1, 1, 10)  # 2 * encoder_hidden
    assert init_cell.shape == (1, 8)
    assert mask.tolist() == [[True]]


def test_encode_deterministic_in_eval(world, bpe):
    model = build(world, bpe)
    tokens = np.array([[1, 2, 3, 4]])
    lengths = np.array([4])
    a = model.encode(tokens, lengths)[0].data
    b = model.encode(tokens, lengths)[0].data
    assert np.array_equal(a, b)


def test_encode_rejects_bad_tokens(world, bpe):
    model = build(world, bpe)
    with pytest.raises(DataError):
        model.encode(np.array([[bpe.vocab_size + 1]]), np.array([1]))


def test_gradient_reaches_token_embeddings(world, bpe):
    model = build(world, bpe)
    w, mask, init_cell = model.encode(np.array([[1, 2, 3]]), np.array([3]))
    T.sum_all(T.mul(init_cell, init_cell)).backward()
    assert model.token_emb.grad is not None
    assert np.abs(model.token_emb.grad[1:4]).sum() > 0.0


@pytest.mark.parametrize(
    "overrides",
    [
        {},
        {"use_junction": False},
        {"use_heading_delta": False},
        {"use_second_rnn": False},
        {"use_text_attention": False},
        {"use_image_attention": False},
        {"visual_variant": "none"},
        {"visual_variant": "semseg"},
        {"visual_variant": "fourth"},
        {"visual_variant": "none", "first_step_visual_variant": "fourth"},
    ],
)
def test_logits_shape_under_every_config(world, bpe, instances, overrides):
    model = build(world, bpe, **overrides)
    eps = episodes_for(world, model, instances[:2])
    enc = [bpe.encode(i.instruction) for i in instances[:2]]
    loss = teacher_forced_loss(model, eps, enc, bpe.pad_id, training=False)
    assert loss.shape == ()
    trajs = rollout_batch(model, world.graph, instances[:2], enc, bpe.pad_id)
    assert len(trajs) == 2


def test_init_loss_near_uniform(world, bpe, instances):
    model = build(world, bpe)
    eps = episodes_for(world, model, instances)
    enc = [bpe.encode(i.instruction) for i in instances]
    loss = teacher_forced_loss(model, eps, enc, bpe.pad_id, training=False)
    assert loss.item() == pytest.approx(np.log(4.0), abs=0.08)


def test_batch_loss_is_timestep_weighted_mean(world, bpe, instances):
    model = build(world, bpe)
    eps = episodes_for(world, model, instances[:2])
    enc = [bpe.encode(i.instruction) for i in instances[:2]]
    both = teacher_forced_loss(model, eps, enc, bpe.pad_id, training=False).item()
    single = [
        teacher_forced_loss(model, [ep], [e], bpe.pad_id, training=False).item()
        for ep, e in zip(eps, enc)
    ]
    t0, t1 = len(eps[0].actions), len(eps[1].actions)
    expected = (single[0] * t0 + single[1] * t1) / (t0 + t1)
    assert both == pytest.approx(expected, rel=1e-5)


def _perturbed_loss(model, eps, enc, pad_id):
    return teacher_forced_loss(model, eps, enc, pad_id, training=False).item()


def test_junction_ablation_disconnects_input(world, bpe, instances):
    model = build(world, bpe, use_junction=False)
    eps = episodes_for(world, model, instances[:2])
    enc = [bpe.encode(i.instruction) for i in instances[:2]]
    base = _perturbed_loss(model, eps, enc, bpe.pad_id)
    for ep in eps:
        ep.junctions[...] = (ep.junctions + 2) % 4
    assert _perturbed_loss(model, eps, enc, bpe.pad_id) == base


def test_heading_delta_ablation_disconnects_input(world, bpe, instances):
    model = build(world, bpe, use_heading_delta=False)
    eps = episodes_for(world, model, instances[:2])
    enc = [bpe.encode(i.instruction) for i in instances[:2]]
    base = _perturbed_loss(model, eps, enc, bpe.pad_id)
    for ep in eps:
        ep.heading_deltas[...] = 0.77
    assert _perturbed_loss(model, eps, enc, bpe.pad_id) == base


def test_visual_none_ignores_feature_store(world, bpe, instances):
    model = build(world, bpe, visual_variant="none", use_junction=False,
                  use_heading_delta=False)
    eps = episodes_for(world, model, instances[:2])
    enc = [bpe.encode(i.instruction) for i in instances[:2]]
    base = _perturbed_loss(model, eps, enc, bpe.pad_id)
    store = world.stores["prefinal"]
    saved = {k: v.copy() for k, v in store.features.items()}
    try:
        for arr in store.features.values():
            arr += 5.0
        eps2 = episodes_for(world, model, instances[:2])
        assert _perturbed_loss(model, eps2, enc, bpe.pad_id) == base
    finally:
        for k, v in saved.items():
            store.features[k][...] = v


def test_full_model_gradients_against_finite_differences(world, bpe, instances):
    model = build(world, bpe)
    eps = episodes_for(world, model, instances[:2])
    enc = [bpe.encode(i.instruction) for i in instances[:2]]

    def f():
        return teacher_forced_loss(model, eps, enc, bpe.pad_id, training=False)

    assert grad_check(f, model.params(), max_coords_per_param=2) < 1e-3


def test_checkpoint_round_trip_bit_identical(world, bpe, instances, tmp_path):
    model = build(world, bpe, seed=3)
    ckpt = str(tmp_path / "model.bin")
    cfg_path = str(tmp_path / "config.json")
    model.save(ckpt, cfg_path)
    clone = AgentModel(AgentConfig.load(cfg_path), world.stores, np.random.default_rng(99))
    clone.load_weights(ckpt)
    enc = [bpe.encode(i.instruction) for i in instances[:3]]
    eps = episodes_for(world, model, instances[:3])
    a = teacher_forced_loss(model, eps, enc, bpe.pad_id, training=False).item()
    b = teacher_forced_loss(clone, eps, enc, bpe.pad_id, training=False).item()
    assert a == b
    ta = rollout_batch(model, world.graph, instances[:3], enc, bpe.pad_id)
    tb = rollout_batch(clone, world.graph, instances[:3], enc, bpe.pad_id)
    for x, y in zip(ta, tb):
        assert [s.action for s in x.steps] == [s.action for s in y.steps]


def test_config_json_keys_mirror_field_names(world, bpe, tmp_path):
    cfg = tiny_config(bpe)
    path = str(tmp_path / "cfg.json")
    cfg.save(path)
    import json

    with open(path) as fh:
        payload = json.load(fh)
    import dataclasses

    assert set(payload) == {f.name for f in dataclasses.fields(AgentConfig)}
    assert AgentConfig.from_json(payload) == cfg


def test_rollout_batch_matches_sequential(world, bpe, instances):
    model = build(world, bpe, seed=5)
    enc = [bpe.encode(i.instruction) for i in instances]
    batched = rollout_batch(model, world.graph, instances, enc, bpe.pad_id)
    for inst, e, tb in zip(instances, enc, batched):
        ta = act_greedy(model, world.graph, inst, e, bpe.pad_id)
        assert [s.action for s in ta.steps] == [s.action for s in tb.steps]
        assert ta.final_state == tb.final_state
        assert ta.terminated == tb.terminated


def test_act_greedy_total_on_random_weights(world, bpe, instances):
    model = build(world, bpe, seed=7)
    traj = act_greedy(model, world.graph, instances[0], bpe.encode(instances[0].instruction),
                      bpe.pad_id)
    assert traj.terminated in ("stopped", "step_limit")
    assert len(traj.steps) <= model.config.max_steps


def test_mixed_config_with_identical_variants_degenerates(world, bpe, instances):
    plain = build(world, bpe, seed=11)
    mixed = build(world, bpe, seed=11, first_step_visual_variant="prefinal")
    enc = [bpe.encode(i.instruction) for i in instances[:2]]
    eps = episodes_for(world, plain, instances[:2])
    a = teacher_forced_loss(plain, eps, enc, bpe.pad_id, training=False).item()
    b = teacher_forced_loss(mixed, eps, enc, bpe.pad_id, training=False).item()
    assert a == b


def test_mixed_model_uses_first_step_variant(world, bpe, instances):
    model = build(world, bpe, seed=13, visual_variant="none",
                  first_step_visual_variant="prefinal")
    assert "prefinal" in model.visual_ffn
    inst = instances[0]
    enc = bpe.encode(inst.instruction)
    traj = act_greedy(model, world.graph, inst, enc, bpe.pad_id)
    assert traj.terminated in ("stopped", "step_limit")


def test_mixed_mean_substitute_dim_conflict_rejected(world, bpe):
    with pytest.raises(ConfigError):
        build(world, bpe, visual_variant="semseg", first_step_visual_variant="prefinal",
              use_image_attention=False)


def test_overfit_two_instances_quickly(world, bpe, instances):
    from streetnav.optim import Adam, AdamConfig
    from streetnav.metrics import score_trajectory

    model = build(world, bpe, seed=17, encoder_hidden=16, decoder_hidden=16,
                  token_emb_dim=16, visual_ffn_widths=(16, 16))
    subset = instances[:2]
    eps = episodes_for(world, model, subset)
    enc = [bpe.encode(i.instruction) for i in subset]
    opt = Adam(model.params(), AdamConfig(lr=2e-3, weight_decay=0.0))
    first = None
    for step in range(150):
        loss = teacher_forced_loss(model, eps, enc, bpe.pad_id, training=False)
        if first is None:
            first = loss.item()
        opt.zero_grad()
        loss.backward()
        opt.step()
    assert loss.item() < 0.25 < first
    trajs = rollout_batch(model, world.graph, subset, enc, bpe.pad_id)
    tcs = [score_trajectory(world.graph, t, list(i.route), i.id).tc
           for i, t in zip(subset, trajs)]
    assert np.mean(tcs) == 1.0


def test_pad_tokens_shapes(bpe):
    tokens, lengths = pad_tokens([[1, 2, 3], [4]], bpe.pad_id)
    assert tokens.shape == (2, 3)
    assert lengths.tolist() == [3, 1]
    assert tokens[1, 1] == bpe.pad_id


def test_prepare_episode_alignment(world, instances):
    ep = prepare_episode(world.graph, world.stores, instances[0], ["prefinal"])
    t = len(ep.actions)
    assert ep.actions[-1] == int(Action.STOP)
    assert ep.prev_actions[0] == START_ACTION_ID
    assert ep.heading_deltas[0] == 0.0
    assert ep.slices["prefinal"].shape == (t, 5, 12)
    assert all(len(arr) == t for arr in (ep.prev_actions, ep.junctions, ep.heading_deltas))
