import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetlab.errors import StructuralError
from hetlab.pomg import GlobalState
from hetlab.spread import (
    CASE_STUDY_VARIANTS,
    PMS_TASKS,
    EnvState,
    SpreadConfig,
    SpreadEnv,
    VecSpread,
    collect_pool,
    make_config,
    scripted_actions,
)


def probe_state(pos, vel=None, landmarks=((0.7, 0.0), (-0.7, 0.0)), colors=(0, 1)):
    pos = np.asarray(pos, dtype=float)
    vel = np.zeros_like(pos) if vel is None else np.asarray(vel, dtype=float)
    return GlobalState(np.concatenate([pos, vel], axis=1), np.asarray(landmarks, dtype=float), colors)


def test_reset_shapes_and_determinism():
    for v in CASE_STUDY_VARIANTS:
        env = SpreadEnv(make_config(v))
        s = env.reset(seed=4)
        assert s.global_state.n_agents == 4
        assert s.global_state.landmarks.shape == (2, 2)
    env = SpreadEnv(make_config("15a_3c"))
    assert env.n_agents == 15
    assert np.bincount(env.groups).tolist() == [5, 5, 5]
    a, b = env.reset(seed=11), env.reset(seed=11)
    assert np.array_equal(a.global_state.flat(), b.global_state.flat())


def test_spawn_geometry():
    env = SpreadEnv(make_config("30a_5c"))
    pos, vel, lm = env.spawn(np.random.default_rng(0), 200)
    assert np.all(np.linalg.norm(pos, axis=-1) <= 0.25 + 1e-12)
    assert np.all(vel == 0)
    r = np.linalg.norm(lm, axis=-1)
    assert np.all((r >= 0.6 - 1e-12) & (r <= 0.9 + 1e-12))


def test_pms_table():
    assert {k: tuple(v) for k, v in PMS_TASKS.items()} == {
        "15a_3c": (5, 5, 5),
        "30a_3c": (10, 10, 10),
        "15a_5c": (3, 3, 3, 3, 3),
        "30a_5c": (3, 3, 3, 12, 9),
    }
    for task, sizes in PMS_TASKS.items():
        cfg = make_config(task)
        assert cfg.n_agents == sum(sizes)


def test_config_json_roundtrip(tmp_path):
    cfg = make_config("v6", seed=3)
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg.to_json()))
    assert SpreadConfig.load(path) == cfg
    with pytest.raises(StructuralError):
        make_config("v9")


def test_noop_fixed_point():
    env = SpreadEnv(make_config("base"))
    s = env.reset(seed=0)
    nxt, _, _, _ = env.step(s, [0, 0, 0, 0])
    assert np.array_equal(nxt.global_state.agent_states[:, :2], s.global_state.agent_states[:, :2])
    assert np.all(nxt.global_state.agent_states[:, 2:] == 0)


def test_v2_terminal_speeds():
    env = SpreadEnv(make_config("v2"))
    s = env.reset(seed=0)
    for _ in range(50):
        # hold +x past the episode limit by restarting the step counter
        s = env.step(EnvState(s.global_state, 0), [1, 1, 1, 1])[0]
    vx = np.abs(s.global_state.agent_states[:, 2])
    assert np.allclose(vx, [1.0, 1.0, 0.3, 0.3])


def test_v3_repulsion_pushes_neighbour_out():
    # group B made passive so only agent 0's field acts
    env = SpreadEnv(make_config("v3", force_sign=(1, 0)))
    probe = probe_state([[0.0, 0.0], [1.1, 1.1], [0.2, 0.0], [-1.1, -1.1]])
    nxt = env.step(EnvState(probe, 0), [0, 0, 0, 0])[0]
    d0 = np.linalg.norm(probe.agent_states[2, :2] - probe.agent_states[0, :2])
    d1 = np.linalg.norm(nxt.global_state.agent_states[2, :2] - nxt.global_state.agent_states[0, :2])
    assert d1 > d0


def test_step_errors():
    env = SpreadEnv(make_config("v1"))
    s = env.reset()
    with pytest.raises(StructuralError):
        env.step(s, [0, 0, 0, 5])
    with pytest.raises(StructuralError):
        env.step(s, [0, 0])
    for _ in range(25):
        s, _, _, done = env.step(s, [0, 0, 0, 0])
    assert done
    with pytest.raises(StructuralError):
        env.step(s, [0, 0, 0, 0])


def test_oracle_observe_v1_permutation():
    env = SpreadEnv(make_config("v1"))
    probe = env.reset(seed=2).global_state
    a, b, c = env.oracle_observe(0, probe, slot=0), env.oracle_observe(1, probe, slot=0), env.oracle_observe(2, probe, slot=0)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert np.array_equal(np.sort(a), np.sort(c))
    base = SpreadEnv(make_config("base"))
    outs = [base.oracle_observe(i, probe, slot=1) for i in range(4)]
    assert all(np.array_equal(outs[0], o) for o in outs)


@given(st.integers(0, 10_000))
def test_v1_observation_multiset_property(seed):
    env = SpreadEnv(make_config("v1"))
    probe = env.reset(seed=seed).global_state
    for slot in range(4):
        a, c = env.oracle_observe(0, probe, slot), env.oracle_observe(3, probe, slot)
        assert np.array_equal(np.sort(a), np.sort(c))


def test_oracle_transition_examples():
    env = SpreadEnv(make_config("v2"))
    probe = probe_state(np.zeros((4, 2)) + [[0, 0], [0.5, 0.5], [-0.5, 0.5], [0.5, -0.5]])
    assert np.array_equal(env.oracle_transition(0, probe, [0, 0, 0, 0], slot=0)[:2], [0.0, 0.0])
    fast = probe_state([[0, 0], [0.5, 0.5], [-0.5, 0.5], [0.5, -0.5]], vel=[[1.0, 0], [0, 0], [0, 0], [0, 0]])
    out_fast = env.oracle_transition(0, fast, [1, 0, 0, 0], slot=0)
    out_slow = env.oracle_transition(2, fast, [1, 0, 0, 0], slot=0)
    assert np.isclose(np.linalg.norm(out_fast[2:]), 1.0)
    assert np.isclose(np.linalg.norm(out_slow[2:]), 0.3)
    base = SpreadEnv(make_config("base"))
    probe = base.reset(seed=5).global_state
    ja = [1, 2, 3, 4]
    outs = [base.oracle_transition(i, probe, ja, slot=2) for i in range(4)]
    assert all(np.array_equal(outs[0], o) for o in outs)


def test_oracle_effect_examples():
    env = SpreadEnv(make_config("v3"))
    probe = probe_state([[0.0, 0.0], [1.1, 1.1], [0.2, 0.0], [-1.1, -1.1]])
    ja = [0, 0, 0, 0]
    rep = env.oracle_effect(0, probe, ja, slot=0).reshape(3, 4)  # others: agents 1, 2, 3
    att = env.oracle_effect(2, probe, ja, slot=0).reshape(3, 4)
    assert rep[1, 0] > 0.2 > att[1, 0]
    assert not np.array_equal(rep, att)

    neutral = SpreadEnv(make_config("base"))
    assert np.array_equal(neutral.oracle_effect(0, probe, ja, 0), neutral.oracle_effect(3, probe, ja, 0))

    far = probe_state([[-1.0, -1.0], [1.0, 1.0], [1.0, 0.5], [0.5, 1.0]])
    # probe out of range of everyone: others move as if it had no field
    a = env.oracle_effect(0, far, ja, slot=0)
    b = env.oracle_effect(2, far, ja, slot=0)
    assert np.array_equal(a, b)


def test_oracle_reward_examples():
    env = SpreadEnv(make_config("v4"))
    lm = ((0.7, 0.0), (-0.7, 0.0))
    probe = probe_state([[0.7, 0.0], [0.0, 1.0], [0.0, -1.0], [0.1, 1.0]], landmarks=lm)
    ra = env.oracle_reward(0, probe, slot=0)
    rb = env.oracle_reward(2, probe, slot=0)
    assert ra == 0.0
    assert np.isclose(rb, -1.4)

    base = SpreadEnv(make_config("base"))
    probe = base.reset(seed=8).global_state
    rs = [base.oracle_reward(i, probe, slot=1) for i in range(4)]
    assert all(r == rs[0] for r in rs)

    # landmarks at distance 0.5 from the origin, no teammate near
    pms = SpreadEnv(make_config("15a_3c"))
    ang = 2 * np.pi * np.arange(3) / 3
    lms = np.stack([0.5 * np.cos(ang), 0.5 * np.sin(ang)], axis=1)
    pos = np.full((15, 2), 1.1)
    pos[0] = 0.0
    probe = probe_state(pos, landmarks=lms, colors=(0, 1, 2))
    for i in range(15):
        assert np.isclose(pms.oracle_reward(i, probe, slot=0), -0.5)


def test_pms_formation_bonus():
    env = SpreadEnv(make_config("15a_3c"))
    lms = np.array([[0.7, 0.0], [-0.35, 0.6], [-0.35, -0.6]])
    pos = np.full((15, 2), -1.1)
    pos[:5] = lms[0]  # whole colour-0 group on its landmark
    probe = probe_state(pos, landmarks=lms, colors=(0, 1, 2))
    r = env.reward_batch(probe.agent_states[None, :, :2], lms[None])[0]
    assert np.allclose(r[:5], 0.5)
    assert np.all(r[5:] < 0)


@pytest.mark.parametrize("variant", CASE_STUDY_VARIANTS + ("15a_5c",))
def test_oracle_rollout_consistency(variant):
    env = SpreadEnv(make_config(variant))
    s = env.reset(seed=1)
    rng = np.random.default_rng(0)
    for _ in range(10):
        ja = rng.integers(0, 5, env.n_agents)
        s2, rec, _ = env.transition(s, ja)
        for i in range(env.n_agents):
            assert np.array_equal(env.oracle_observe(i, s2.global_state), rec.next_observations[i])
            assert np.array_equal(env.oracle_transition(i, rec.global_state, ja), rec.next_local_states[i])
            assert env.oracle_reward(i, rec.global_state, ja) == rec.rewards[i]
        s = s2


def test_speed_clip_and_position_bounds():
    cfg = make_config("v6")
    vec = VecSpread(SpreadEnv(cfg), 16, seed=0)
    rng = np.random.default_rng(1)
    caps = np.asarray(cfg.max_speed)[cfg.groups]
    for _ in range(60):
        vec.step(rng.integers(0, 5, (16, 4)))
        speed = np.linalg.norm(vec.vel, axis=-1)
        assert np.all(speed <= caps + 1e-12)
        assert np.all(np.abs(vec.pos) <= 1.2)


def test_trajectory_determinism():
    cfg = make_config("v6")
    a = collect_pool(cfg, 16, seed=5)
    b = collect_pool(cfg, 16, seed=5)
    assert len(a) == len(b) == 16 * 25
    for ra, rb in zip(a.records(), b.records()):
        assert ra.to_json() == rb.to_json()


def test_vec_records_survive_reset():
    env = SpreadEnv(make_config("v4"))
    vec = VecSpread(env, 2, seed=0)
    recs = []
    obs = vec.observe()
    for _ in range(30):
        obs, _, _ = vec.step(np.zeros((2, 4), dtype=int), obs, recs)
    for rec in recs:
        gs = rec.global_state
        pos, vel, lm = gs.agent_states[None, :, :2], gs.agent_states[None, :, 2:], gs.landmarks[None]
        assert np.array_equal(env.observe_batch(pos, vel, lm)[0], rec.observations)


def test_scripted_controller_beats_random():
    cfg = make_config("v4")
    env = SpreadEnv(cfg)
    rng = np.random.default_rng(0)
    pos, vel, lm = env.spawn(rng, 64)
    p2, v2 = pos.copy(), vel.copy()
    tot_s = tot_r = 0.0
    for _ in range(cfg.episode_len):
        pos, vel, r = env.step_batch(pos, vel, lm, scripted_actions(env, pos, lm))
        p2, v2, r2 = env.step_batch(p2, v2, lm, rng.integers(0, 5, (64, 4)))
        tot_s += r.sum()
        tot_r += r2.sum()
    assert tot_s > tot_r
