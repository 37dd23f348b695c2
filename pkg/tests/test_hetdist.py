import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetlab.cvae import MODEL_BASED, CvaeConfig, CvaeModel
from hetlab.errors import CapacityError, StateError, StructuralError
from hetlab.hetdist import (
    ENV_KINDS,
    DistanceMatrix,
    HetKind,
    QuantifyConfig,
    _matrix_from_posteriors,
    agent_posteriors,
    build_kind_samples,
    build_meta_samples,
    distance_matrix,
    meta_distance_matrix,
    pair_distance,
    policy_distance_matrix,
    wasserstein2_diag,
)
from hetlab.pomg import GlobalState, SamplePool, TransitionRecord
from hetlab.spread import SpreadEnv, collect_pool, make_config
from hetlab.tinynet import GaussianHead

_POOLS = {}


def pool_for(variant, episodes=200, seed=0):
    key = (variant, episodes, seed)
    if key not in _POOLS:
        _POOLS[key] = collect_pool(make_config(variant), episodes, seed=seed)
    return _POOLS[key]


def head(mu, sigma):
    mu, sigma = np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(sigma, float))
    return GaussianHead(mu, np.log(sigma))


# -- wasserstein -------------------------------------------------------------


def test_w2_identical_standard_normals_is_zero():
    assert float(wasserstein2_diag(head(np.zeros(3), np.ones(3)), head(np.zeros(3), np.ones(3)))) == 0.0


def test_w2_mean_shift():
    assert float(wasserstein2_diag(head(0.0, 1.0), head(3.0, 1.0))) == pytest.approx(3.0, abs=1e-12)


def test_w2_dim_mismatch():
    with pytest.raises(StructuralError):
        wasserstein2_diag(head(np.zeros(2), np.ones(2)), head(np.zeros(3), np.ones(3)))


def test_w2_matches_sorted_sample_coupling():
    rng = np.random.default_rng(7)
    for _ in range(5):
        mu1, mu2 = rng.normal(size=4), rng.normal(size=4)
        s1, s2 = rng.uniform(0.2, 2.0, 4), rng.uniform(0.2, 2.0, 4)
        a = mu1 + s1 * rng.standard_normal((100_000, 4))
        b = mu2 + s2 * rng.standard_normal((100_000, 4))
        # monotone coupling is optimal per dimension; independent dims add in quadrature
        empirical = np.sqrt(((np.sort(a, 0) - np.sort(b, 0)) ** 2).mean(0).sum())
        closed = float(wasserstein2_diag(head(mu1, s1), head(mu2, s2)))
        assert closed == pytest.approx(empirical, rel=0.02)


# -- kind samples ------------------------------------------------------------


def test_obs_samples_identical_on_base():
    cfg = make_config("base")
    s = build_kind_samples("obs", pool_for("base"), SpreadEnv(cfg), 512, seed=0)
    assert s.y.shape[:2] == (4, 512)
    for i in range(1, 4):
        assert np.array_equal(s.y[0], s.y[i])


def _records_at_landmark(pool, lm_index, n):
    out = []
    for r in pool.records()[:n]:
        gs = r.global_state.copy()
        gs.agent_states[:, :2] = gs.landmarks[lm_index]
        out.append(TransitionRecord(gs, r.joint_action, r.observations, r.next_local_states,
                                    r.next_observations, r.rewards))
    return SamplePool(len(out)).extend(out)


def test_objective_probe_on_group_a_landmark():
    cfg = make_config("v4")
    pool = _records_at_landmark(pool_for("v4"), 0, 256)
    s = build_kind_samples("objective", pool, SpreadEnv(cfg), 256, seed=3)
    ya, yb = s.y[:2, :, 0], s.y[2:, :, 0]
    assert np.all(ya == 0.0)
    assert np.all(yb < 0.0)


def test_effect_samples_reproducible():
    cfg = make_config("v3")
    env = SpreadEnv(cfg)
    a = build_kind_samples("effect", pool_for("v3"), env, 1024, seed=11)
    b = build_kind_samples("effect", pool_for("v3"), env, 1024, seed=11)
    assert np.array_equal(a.x, b.x) and np.array_equal(a.y, b.y) and np.array_equal(a.origin, b.origin)


def test_kind_samples_capacity_error():
    pool = SamplePool(10).extend(pool_for("base").records()[:10])
    with pytest.raises(CapacityError):
        build_kind_samples("obs", pool, SpreadEnv(make_config("base")), 11, seed=0)


def test_meta_kind_rejected_by_env_sampler():
    with pytest.raises(StructuralError):
        build_kind_samples("meta", pool_for("base"), SpreadEnv(make_config("base")), 8, seed=0)


# -- pair distances ----------------------------------------------------------


def test_pair_distance_untrained_raises():
    model = CvaeModel.build(MODEL_BASED, 4, 2, CvaeConfig(hidden=(8,)), rng=0)
    with pytest.raises(StateError):
        pair_distance(0, 1, model, np.zeros((3, 4)), np.zeros((2, 3, 2)))


@pytest.fixture(scope="module")
def small_cfg():
    return QuantifyConfig(M=512, train_count=2048, cvae=CvaeConfig(beta=1e-2, steps=600),
                          meta_cvae=CvaeConfig(beta=1e-2, steps=600))


def test_pair_distance_same_agent_is_zero(small_cfg):
    cfg = make_config("v2")
    env = SpreadEnv(cfg)
    _, model = distance_matrix("response", pool_for("v2"), env, small_cfg, seed=0)
    s = build_kind_samples("response", pool_for("v2"), env, 256, seed=1)
    for i in range(4):
        assert pair_distance(i, i, model, s.x, s.y) == 0.0


@pytest.mark.parametrize("kind", [k.value for k in ENV_KINDS])
def test_base_model_based_matrix_is_zero(kind, small_cfg):
    cfg = make_config("base")
    dm, _ = distance_matrix(kind, pool_for("base"), SpreadEnv(cfg), small_cfg, seed=0)
    assert np.array_equal(dm.values, np.zeros((4, 4)))
    assert dm.axiom_violations() == []


def test_v2_response_block_ratio():
    cfg = make_config("v2")
    dm, _ = distance_matrix("response", pool_for("v2"), SpreadEnv(cfg), seed=0)
    within, cross = dm.block_means(cfg.groups)
    assert cross > 5 * within
    assert dm.axiom_violations() == []


def test_v6_meta_block_structure():
    cfg = make_config("v6")
    dm, _ = distance_matrix("meta", pool_for("v6"), SpreadEnv(cfg), seed=0)
    within, cross = dm.block_means(cfg.groups)
    assert within < 0.2 * cross
    assert dm.axiom_violations() == []


def test_identical_oracle_outputs_give_zero_pair_distance(small_cfg):
    # v4 agents 0 and 1 share every oracle; the pair must be exactly zero
    cfg = make_config("v4")
    dm, _ = distance_matrix("objective", pool_for("v4"), SpreadEnv(cfg), small_cfg, seed=0)
    assert dm.values[0, 1] == 0.0 and dm.values[2, 3] == 0.0
    assert dm.values[0, 2] > 0.0


# -- meta samples ------------------------------------------------------------


def _zero_reward_pool(n_records=4):
    recs = [
        TransitionRecord(r.global_state, r.joint_action, r.observations, r.next_local_states,
                         r.next_observations, np.zeros(r.n_agents))
        for r in pool_for("base").records()[:n_records]
    ]
    return SamplePool(n_records).extend(recs)


def test_meta_zero_reward_block():
    b = build_meta_samples(_zero_reward_pool(), seed=0)
    obs_w = make_config("base").obs_dim
    assert np.all(b.y[:, -obs_w:] == 0.0)


def _synthetic_records(n_records, n_agents=3, obs_w=14, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_records):
        gs = GlobalState(rng.normal(size=(n_agents, 4)), rng.normal(size=(2, 2)), [0, 1])
        out.append(TransitionRecord(gs, rng.integers(0, 5, n_agents), rng.normal(size=(n_agents, obs_w)),
                                    rng.normal(size=(n_agents, 4)), rng.normal(size=(n_agents, obs_w)),
                                    rng.normal(size=n_agents)))
    return out


def test_meta_reward_block_width_and_value():
    recs = _synthetic_records(6)
    b = build_meta_samples(SamplePool(6).extend(recs), seed=0)
    block = b.y[:, -14:]
    want = np.concatenate([r.rewards for r in recs])
    assert b.y.shape[1] == 4 + 14 + 14
    assert np.array_equal(block, np.repeat(want[:, None], 14, axis=1))


def test_meta_without_reward_drops_block():
    pool = SamplePool(6).extend(_synthetic_records(6))
    full = build_meta_samples(pool, seed=0)
    reduced = build_meta_samples(pool, seed=0, include_reward=False)
    assert reduced.y.shape[1] == full.y.shape[1] - 14
    assert np.array_equal(reduced.y, full.y[:, :-14])
    assert np.array_equal(reduced.x, full.x)


def test_meta_samples_layout():
    recs = pool_for("base").records()[:3]
    b = build_meta_samples(SamplePool(3).extend(recs), seed=0)
    # x = local state (4) + one-hot action (5); ids cycle over agents
    assert b.x.shape == (12, 9)
    assert list(b.ids) == [0, 1, 2, 3] * 3
    assert np.array_equal(b.x[5, :4], recs[1].global_state.agent_states[1])
    assert b.x[5, 4 + recs[1].joint_action[1]] == 1.0


def test_meta_empty_pool():
    with pytest.raises(CapacityError):
        build_meta_samples(SamplePool(4), seed=0)


# -- policy distances --------------------------------------------------------


def test_shared_policy_gives_zero_matrix(small_cfg):
    w = np.random.default_rng(0).normal(size=(make_config("base").obs_dim, 5))

    def shared(i, x):
        z = x @ w
        e = np.exp(z - z.max(1, keepdims=True))
        return e / e.sum(1, keepdims=True)

    dm, _ = policy_distance_matrix(shared, pool_for("base"), 4, small_cfg, seed=0)
    assert np.array_equal(dm.values, np.zeros((4, 4)))


def test_distinct_fixed_action_policies(small_cfg):
    def fixed(i, x):
        out = np.zeros((len(x), 5))
        out[:, 0 if i < 2 else 3] = 1.0
        return out

    dm, _ = policy_distance_matrix(fixed, pool_for("base"), 4, small_cfg, seed=0)
    assert dm.values[0, 1] == 0.0 and dm.values[2, 3] == 0.0
    assert dm.values[0, 2] > 0.0 and dm.values[1, 3] > 0.0


# -- matrix properties -------------------------------------------------------


@settings(max_examples=40)
@given(st.integers(2, 7), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_posterior_matrix_axioms(n, d, seed):
    rng = np.random.default_rng(seed)
    M = 64
    mu = rng.normal(size=(n, M, d))
    sigma = rng.uniform(0.05, 3.0, (n, M, d))
    dm = DistanceMatrix(HetKind.META, _matrix_from_posteriors(mu, sigma), M)
    assert dm.axiom_violations() == []
    # W2 is a metric per condition, so the mean obeys the triangle inequality exactly
    v = dm.values
    assert np.all(v[:, None, :] <= v[:, :, None] + v[None, :, :] + 1e-12)


def test_axiom_violation_detection():
    dm = DistanceMatrix(HetKind.META, np.array([[0.0, 1.0], [2.0, 0.0]]), 1024)
    assert "asymmetric" in dm.axiom_violations()
    dm = DistanceMatrix(HetKind.META, np.array([[0.0, 10.0, 1.0], [10.0, 0.0, 1.0], [1.0, 1.0, 0.0]]), 1024)
    assert "triangle inequality" in dm.axiom_violations()


def test_matrix_save_round_trip(tmp_path):
    v = np.array([[0.0, 0.1 + 0.2], [0.1 + 0.2, 0.0]])
    dm = DistanceMatrix(HetKind.OBS, v, 1024, seed=3, scenario="v1")
    path = dm.save(tmp_path)
    assert path.name == "obs_het.csv"
    back = np.loadtxt(path, delimiter=",")
    assert np.array_equal(back, v)
    assert (tmp_path / "obs_het.json").exists()


def test_doubling_m_consistency(small_cfg):
    cfg = make_config("v2")
    env = SpreadEnv(cfg)
    pool = pool_for("v2")
    _, model = distance_matrix("response", pool, env, small_cfg, seed=0)
    M = 1024
    tol = 3 / np.sqrt(M)
    off = ~np.eye(4, dtype=bool)
    passed = total = 0
    for t in range(20):
        a = build_kind_samples("response", pool, env, M, seed=100 + t)
        b = build_kind_samples("response", pool, env, 2 * M, seed=500 + t)
        da = _matrix_from_posteriors(*agent_posteriors(model, a.x, a.y, 4))
        db = _matrix_from_posteriors(*agent_posteriors(model, b.x, b.y, 4))
        # identical-oracle pairs are exactly zero at any M and count as unchanged
        change = np.abs(db - da)[off]
        rel = np.divide(change, da[off], out=np.zeros_like(change), where=da[off] > 0)
        passed += int((rel < tol).sum())
        total += rel.size
    assert passed / total >= 0.95


def test_model_free_near_identity():
    cfg = QuantifyConfig()
    base, _ = meta_distance_matrix(pool_for("base"), 4, cfg, seed=0)
    clone = base.block_means(make_config("base").groups)
    base_level = max(clone)
    crosses = {}
    for v in ("v1", "v2", "v3", "v4"):
        dm, _ = meta_distance_matrix(pool_for(v), 4, cfg, seed=0)
        crosses[v] = dm.block_means(make_config(v).groups)[1]
    assert base_level < 0.2 * min(crosses.values()), (base_level, crosses)
