"""Heterogeneity distances between agents.

For a core function F and condition x drawn from pooled trajectories,

    d_ij = E_x [ W2( q_i(z | x), q_j(z | x) ) ]

where q_i is the CVAE posterior for agent i: f(z | y_i, x) with y_i taken
from agent i's oracle (model-based kinds) or f(z | i, x) (model-free
kinds).  W2 between diagonal Gaussians has a closed form, so the
expectation is a plain Monte Carlo mean over M pooled conditions.
"""

from __future__ import annotations

import enum
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from hetlab.cvae import MODEL_BASED, MODEL_FREE, CvaeBatch, CvaeConfig, CvaeModel, train_cvae
from hetlab.errors import CapacityError, StateError, StructuralError
from hetlab.pomg import LOCAL_STATE_DIM, N_ACTIONS, SamplePool, TransitionRecord, pad_to_width
from hetlab.spread import SpreadEnv
from hetlab.tinynet import GaussianHead


class HetKind(str, enum.Enum):
    OBS = "obs"
    RESPONSE = "response"
    EFFECT = "effect"
    OBJECTIVE = "objective"
    POLICY = "policy"
    META = "meta"

    @property
    def model_based(self) -> bool:
        return self is not HetKind.META


ENV_KINDS = (HetKind.OBS, HetKind.RESPONSE, HetKind.EFFECT, HetKind.OBJECTIVE)


def wasserstein2_diag(g1: GaussianHead, g2: GaussianHead) -> np.ndarray:
    """Closed-form 2-Wasserstein distance between diagonal Gaussians (last axis)."""
    if g1.mu.shape[-1] != g2.mu.shape[-1]:
        raise StructuralError(f"latent widths differ: {g1.mu.shape[-1]} vs {g2.mu.shape[-1]}")
    return _w2(g1.mu, g1.sigma, g2.mu, g2.sigma)


def _w2(mu1, s1, mu2, s2):
    return np.sqrt(((mu1 - mu2) ** 2).sum(-1) + ((s1 - s2) ** 2).sum(-1))


@dataclass
class KindSamples:
    """Conditions shared by all agents plus per-agent targets.

    Model-based kinds fill ``y`` with shape (n_agents, M, y_width): every
    agent's target is evaluated at the same condition row.  ``origin`` is
    the agent whose trajectory supplied the condition (probe slot, or the
    observing agent for policy samples).
    """

    kind: HetKind
    x: np.ndarray
    y: np.ndarray | None
    origin: np.ndarray

    def __len__(self) -> int:
        return len(self.x)

    @property
    def n_agents(self) -> int:
        return self.y.shape[0]

    def training_batch(self) -> CvaeBatch:
        n, M, w = self.y.shape
        return CvaeBatch(np.tile(self.x, (n, 1)), self.y.reshape(n * M, w), np.repeat(np.arange(n), M))


def _onehot_actions(a: np.ndarray) -> np.ndarray:
    out = np.zeros(a.shape + (N_ACTIONS,))
    np.put_along_axis(out, a[..., None], 1.0, axis=-1)
    return out


def _stack_records(recs: list[TransitionRecord]):
    st = np.stack([r.global_state.agent_states for r in recs])
    pos, vel = st[..., :2], st[..., 2:]
    lm = np.stack([r.global_state.landmarks for r in recs])
    ja = np.stack([r.joint_action for r in recs])
    return pos, vel, lm, ja


def _probe_first(a: np.ndarray, slots: np.ndarray) -> np.ndarray:
    """Reorder axis 1 so the probe slot comes first, others keep slot order."""
    n = a.shape[1]
    order = np.array([[s] + [k for k in range(n) if k != s] for s in range(n)])[slots]
    return np.take_along_axis(a, order.reshape(order.shape + (1,) * (a.ndim - 2)), axis=1)


def build_kind_samples(kind, pool: SamplePool, env: SpreadEnv, count: int, seed) -> KindSamples:
    """Draw ``count`` pooled conditions and query every agent's oracle at each."""
    kind = HetKind(kind)
    if kind not in ENV_KINDS:
        raise StructuralError(f"{kind.value} samples are not built from environment oracles")
    if count > len(pool):
        raise CapacityError(f"need {count} pooled records, pool holds {len(pool)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=count, replace=False)
    recs = [pool._records[k] for k in idx]
    n = env.n_agents
    slots = rng.integers(0, n, count)
    pos, vel, lm, ja = _stack_records(recs)
    states = np.concatenate([pos, vel], axis=-1)
    env_block = np.concatenate([lm.reshape(count, -1), np.broadcast_to(env.colors.astype(float), (count, lm.shape[1]))], axis=1)
    ordered = _probe_first(states, slots)
    acts = _onehot_actions(_probe_first(ja, slots))
    if kind is HetKind.OBS:
        x = np.concatenate([ordered.reshape(count, -1), env_block], axis=1)
    elif kind is HetKind.EFFECT:
        # (s', s, a', a): everything but the probe, then the probe itself
        x = np.concatenate(
            [ordered[:, 1:].reshape(count, -1), env_block, ordered[:, 0], acts[:, 1:].reshape(count, -1), acts[:, 0]],
            axis=1,
        )
    else:
        x = np.concatenate([ordered.reshape(count, -1), env_block, acts.reshape(count, -1)], axis=1)

    ys = []
    for i in range(n):
        yi = None
        for p in np.unique(slots):
            m = slots == p
            if kind is HetKind.OBS:
                out = env.oracle_observe_batch(i, pos[m], vel[m], lm[m], slot=p)
            elif kind is HetKind.RESPONSE:
                out = env.oracle_transition_batch(i, pos[m], vel[m], ja[m], slot=p)
            elif kind is HetKind.EFFECT:
                out = env.oracle_effect_batch(i, pos[m], vel[m], ja[m], slot=p)
            else:
                out = env.oracle_reward_batch(i, pos[m], lm[m], slot=p)[:, None]
            if yi is None:
                yi = np.zeros((count, out.shape[1]))
            yi[m] = out
        ys.append(yi)
    return KindSamples(kind, x, np.stack(ys), slots)


def build_meta_samples(pool: SamplePool, seed, count: int | None = None, include_reward: bool = True,
                       state_width: int | None = None) -> CvaeBatch:
    """Per-record, per-agent meta-transition samples.

    x = (local state padded to the system-wide width, one-hot action)
    y = (next local state, next observation, reward replicated to the
    observation width).  ``include_reward=False`` drops the reward block.
    """
    if len(pool) == 0:
        raise CapacityError("empty pool")
    rng = np.random.default_rng(seed)
    if count is None or count >= len(pool):
        recs = pool.records()
    else:
        recs = [pool._records[k] for k in rng.choice(len(pool), size=count, replace=False)]
    return meta_from_records(recs, include_reward, state_width)


def meta_from_records(recs, include_reward: bool = True, state_width: int | None = None) -> CvaeBatch:
    n = recs[0].n_agents
    sw = state_width or LOCAL_STATE_DIM
    s = np.stack([r.global_state.agent_states for r in recs])  # (R, n, 4)
    if s.shape[-1] < sw:
        s = np.stack([[pad_to_width(v, sw) for v in row] for row in s])
    a = _onehot_actions(np.stack([r.joint_action for r in recs]))
    ns = np.stack([np.asarray(r.next_local_states, dtype=float) for r in recs])
    no = np.stack([np.asarray(r.next_observations, dtype=float) for r in recs])
    parts = [ns, no]
    if include_reward:
        rw = np.stack([r.rewards for r in recs])
        parts.append(np.repeat(rw[..., None], no.shape[-1], axis=-1))
    x = np.concatenate([s, a], axis=-1).reshape(len(recs) * n, -1)
    y = np.concatenate(parts, axis=-1).reshape(len(recs) * n, -1)
    ids = np.tile(np.arange(n), len(recs))
    return CvaeBatch(x, y, ids)


# ---------------------------------------------------------------------------
# distances
# ---------------------------------------------------------------------------


@dataclass
class DistanceMatrix:
    kind: HetKind
    values: np.ndarray
    sample_count: int
    seed: int = 0
    scenario: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n_agents(self) -> int:
        return self.values.shape[0]

    def triangle_slack(self) -> float:
        return 3.0 * float(self.values.max(initial=0.0)) / np.sqrt(self.sample_count)

    def axiom_violations(self) -> list[str]:
        d = self.values
        bad = []
        if not np.array_equal(d, d.T):
            bad.append("asymmetric")
        if np.any(d < 0):
            bad.append("negative entry")
        if np.any(np.diag(d) != 0):
            bad.append("nonzero diagonal")
        tri = d[:, :, None] + d[None, :, :]  # [i, k, j] = d_ik + d_kj
        if np.any(d[:, None, :] > tri + self.triangle_slack()):
            bad.append("triangle inequality")
        return bad

    def to_csv(self) -> str:
        buf = io.StringIO()
        for row in self.values:
            buf.write(",".join(f"{v:.17g}" for v in row) + "\n")
        return buf.getvalue()

    def checksum(self) -> str:
        return hashlib.sha256(self.to_csv().encode()).hexdigest()

    def manifest(self) -> dict:
        return {
            "kind": self.kind.value,
            "M": self.sample_count,
            "seed": self.seed,
            "scenario": self.scenario,
            "checksum": self.checksum(),
            **self.meta,
        }

    def save(self, out_dir, stem: str | None = None) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = stem or f"{self.kind.value}_het"
        (out / f"{stem}.csv").write_text(self.to_csv())
        (out / f"{stem}.json").write_text(json.dumps(self.manifest(), indent=1, sort_keys=True))
        return out / f"{stem}.csv"

    def block_means(self, groups) -> tuple[float, float]:
        """(within-group mean, cross-group mean) over off-diagonal pairs."""
        g = np.asarray(groups)
        same = g[:, None] == g[None, :]
        off = ~np.eye(len(g), dtype=bool)
        within = self.values[same & off]
        cross = self.values[~same]
        return (float(within.mean()) if within.size else 0.0, float(cross.mean()) if cross.size else 0.0)


def _matrix_from_posteriors(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Upper triangle of mean pairwise W2, mirrored; mu/sigma are (n, M, d)."""
    n = mu.shape[0]
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = _w2(mu[i], sigma[i], mu[j], sigma[j]).mean()
            d[j, i] = d[i, j]
    return d


def agent_posteriors(model: CvaeModel, x: np.ndarray, y: np.ndarray | None, n_agents: int):
    """Encode every agent at every condition; returns (mu, sigma) of shape (n, M, d)."""
    if not model.trained:
        raise StateError("CVAE has not been trained")
    mus, sigmas = [], []
    for i in range(n_agents):
        head = model.encode(x, y=y[i]) if model.mode == MODEL_BASED else model.encode(x, ids=np.full(len(x), i))
        mus.append(head.mu)
        sigmas.append(head.sigma)
    return np.stack(mus), np.stack(sigmas)


def pair_distance(i: int, j: int, model: CvaeModel, x: np.ndarray, y: np.ndarray | None = None) -> float:
    """Monte Carlo mean of W2 between agents i and j over the condition rows."""
    if not model.trained:
        raise StateError("CVAE has not been trained")
    if i == j:
        return 0.0
    if model.mode == MODEL_BASED:
        gi, gj = model.encode(x, y=y[i]), model.encode(x, y=y[j])
    else:
        gi, gj = model.encode(x, ids=np.full(len(x), i)), model.encode(x, ids=np.full(len(x), j))
    return float(wasserstein2_diag(gi, gj).mean())


@dataclass(frozen=True)
class QuantifyConfig:
    """Monte Carlo and CVAE settings for one distance matrix."""

    M: int = 1024
    train_count: int = 4096
    cvae: CvaeConfig = CvaeConfig(beta=1e-2)
    meta_cvae: CvaeConfig = CvaeConfig(beta=1e-2)
    include_reward: bool = True

    def to_json(self) -> dict:
        d = asdict(self)
        for k in ("cvae", "meta_cvae"):
            d[k]["hidden"] = list(d[k]["hidden"])
        return d

    @classmethod
    def from_json(cls, d: dict) -> "QuantifyConfig":
        d = dict(d)
        for k in ("cvae", "meta_cvae"):
            if k in d:
                c = dict(d[k])
                c["hidden"] = tuple(c.get("hidden", (64, 64)))
                d[k] = CvaeConfig(**c)
        return cls(**d)


def distance_matrix(kind, pool: SamplePool, env: SpreadEnv, cfg: QuantifyConfig = QuantifyConfig(), seed: int = 0):
    """Train the kind's CVAE on pooled samples and return (DistanceMatrix, model)."""
    kind = HetKind(kind)
    if kind is HetKind.META:
        return meta_distance_matrix(pool, env.n_agents, cfg, seed, scenario=env.cfg.scenario)
    if kind is HetKind.POLICY:
        raise StructuralError("use policy_distance_matrix for policy heterogeneity")
    ss = np.random.SeedSequence([seed, list(HetKind).index(kind)])
    s_train, s_eval, s_cvae = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    train = build_kind_samples(kind, pool, env, min(cfg.train_count, len(pool)), s_train)
    model = train_cvae(train.training_batch(), MODEL_BASED, cfg.cvae, s_cvae)
    ev = build_kind_samples(kind, pool, env, cfg.M, s_eval)
    mu, sigma = agent_posteriors(model, ev.x, ev.y, env.n_agents)
    dm = DistanceMatrix(kind, _matrix_from_posteriors(mu, sigma), cfg.M, seed, env.cfg.scenario)
    return dm, model


def meta_distance_matrix(pool: SamplePool, n_agents: int, cfg: QuantifyConfig = QuantifyConfig(), seed: int = 0,
                         scenario: str = "", records: list | None = None):
    """Model-free meta-transition distances from pooled records alone."""
    ss = np.random.SeedSequence([seed, 5])
    s_train, s_eval, s_cvae = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    if records is None:
        train = build_meta_samples(pool, s_train, cfg.train_count, cfg.include_reward)
    else:
        train = meta_from_records(records, cfg.include_reward)
    if len(train) < cfg.M:
        raise CapacityError(f"need {cfg.M} meta samples, have {len(train)}")
    model = train_cvae(train, MODEL_FREE, cfg.meta_cvae, s_cvae, n_ids=n_agents)
    rng = np.random.default_rng(s_eval)
    x = train.x[rng.choice(len(train), size=cfg.M, replace=False)]
    mu, sigma = agent_posteriors(model, x, None, n_agents)
    dm = DistanceMatrix(HetKind.META, _matrix_from_posteriors(mu, sigma), cfg.M, seed, scenario)
    return dm, model


PolicyFn = Callable[[int, np.ndarray], np.ndarray]


def build_policy_samples(policy: PolicyFn, pool: SamplePool, n_agents: int, count: int, seed) -> KindSamples:
    """Observations pooled over all agents; y_i = agent i's action probabilities."""
    if count > len(pool):
        raise CapacityError(f"need {count} pooled records, pool holds {len(pool)}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(pool), size=count, replace=False)
    origin = rng.integers(0, n_agents, count)
    x = np.stack([np.asarray(pool._records[k].observations[o], dtype=float) for k, o in zip(idx, origin)])
    y = np.stack([np.asarray(policy(i, x), dtype=float) for i in range(n_agents)])
    return KindSamples(HetKind.POLICY, x, y, origin)


def policy_distance_matrix(policy: PolicyFn, pool: SamplePool, n_agents: int, cfg: QuantifyConfig = QuantifyConfig(),
                           seed: int = 0, scenario: str = ""):
    """Policy heterogeneity: model-based encoding of action-probability vectors."""
    ss = np.random.SeedSequence([seed, 4])
    s_train, s_eval, s_cvae = (int(c.generate_state(1)[0]) for c in ss.spawn(3))
    train = build_policy_samples(policy, pool, n_agents, min(cfg.train_count, len(pool)), s_train)
    model = train_cvae(train.training_batch(), MODEL_BASED, cfg.cvae, s_cvae)
    ev = build_policy_samples(policy, pool, n_agents, cfg.M, s_eval)
    mu, sigma = agent_posteriors(model, ev.x, ev.y, n_agents)
    dm = DistanceMatrix(HetKind.POLICY, _matrix_from_posteriors(mu, sigma), cfg.M, seed, scenario)
    return dm, model


def logged_policy_distance_matrix(records: list[TransitionRecord], cfg: QuantifyConfig = QuantifyConfig(), seed: int = 0):
    """Policy heterogeneity from logged action probabilities only (model-free:
    each agent's probabilities are known only at its own observations)."""
    if any(r.action_probs is None for r in records):
        raise StructuralError("records carry no action probabilities")
    n = records[0].n_agents
    x = np.concatenate([np.asarray(r.observations, dtype=float) for r in records])
    y = np.concatenate([np.asarray(r.action_probs, dtype=float) for r in records])
    ids = np.tile(np.arange(n), len(records))
    data = CvaeBatch(x, y, ids)
    if len(data) < cfg.M:
        raise CapacityError(f"need {cfg.M} logged samples, have {len(data)}")
    model = train_cvae(data, MODEL_FREE, cfg.meta_cvae, seed, n_ids=n)
    rng = np.random.default_rng(seed + 1)
    xs = x[rng.choice(len(x), size=cfg.M, replace=False)]
    mu, sigma = agent_posteriors(model, xs, None, n)
    return DistanceMatrix(HetKind.POLICY, _matrix_from_posteriors(mu, sigma), cfg.M, seed), model
