"""Independent clipped-surrogate PPO with pluggable parameter sharing.

Every agent maps to one network bundle (policy, critic and their optimiser
state).  The sharing paradigm is only that map: NPS gives each agent its own
bundle, FPS and FPSid give all agents one bundle, and HetDPS rewrites the
map every ``quant_period`` updates from Meta-Het clustering.
"""

from __future__ import annotations

import csv
import enum
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from hetlab.errors import NumericError, StructuralError
from hetlab.grouping import (
    ClusterAssignment,
    MergeMode,
    NetworkAssignment,
    affinity_propagation,
    apply_ops,
    reconcile,
)
from hetlab.hetdist import QuantifyConfig, meta_distance_matrix
from hetlab.pomg import N_ACTIONS, SamplePool, TransitionRecord
from hetlab.spread import SpreadConfig, SpreadEnv, VecSpread
from hetlab.tinynet import Adam, DenseNet, GradBuffer, clip_grad_norm

log = logging.getLogger(__name__)


class Paradigm(str, enum.Enum):
    NPS = "nps"
    FPS = "fps"
    FPSID = "fpsid"
    HETDPS = "hetdps"


@dataclass(frozen=True)
class TrainConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    lr: float = 3e-4
    epochs: int = 4
    minibatches: int = 4
    entropy_coef: float = 0.01
    rollout_len: int = 128
    n_envs: int = 8
    quant_period: int = 100
    total_updates: int = 500
    seed: int = 0
    merge_mode: str = "majority"
    init: str = "fps"
    hidden: tuple = (64, 64)
    max_grad_norm: float = 0.5
    pool_capacity: int = 50_000
    eval_episodes: int = 32
    quantify: QuantifyConfig = field(default_factory=QuantifyConfig)

    def __post_init__(self):
        positive = ("gamma", "gae_lambda", "lr", "epochs", "minibatches", "rollout_len", "n_envs",
                    "quant_period", "total_updates", "max_grad_norm", "pool_capacity", "eval_episodes")
        bad = [k for k in positive if not getattr(self, k) > 0]
        if bad:
            raise StructuralError(f"config fields must be positive: {bad}")
        if not 0 < self.clip < 1:
            raise StructuralError("clip must lie in (0, 1)")
        if self.entropy_coef < 0:
            raise StructuralError("entropy_coef must be non-negative")
        MergeMode(self.merge_mode)
        if self.init not in ("fps", "nps"):
            raise StructuralError("init must be 'fps' or 'nps'")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["quantify"] = self.quantify.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "quantify" in d:
            d["quantify"] = QuantifyConfig.from_json(d["quantify"])
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


# -- networks ------------------------------------------------------------------


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class NetBundle:
    """A policy network, its critic and their optimiser states."""

    policy: DenseNet
    value: DenseNet
    opt_pi: Adam
    opt_v: Adam

    @classmethod
    def build(cls, in_dim: int, hidden, lr: float, rng) -> "NetBundle":
        pi = DenseNet.build([in_dim, *hidden, N_ACTIONS], rng, out_gain=0.01)
        v = DenseNet.build([in_dim, *hidden, 1], rng)
        return cls(pi, v, Adam(lr=lr), Adam(lr=lr))

    def copy(self) -> "NetBundle":
        return NetBundle(self.policy.copy(), self.value.copy(), self.opt_pi.copy(), self.opt_v.copy())

    @classmethod
    def blend(cls, items: list, w) -> "NetBundle":
        """Parameter-space weighted mean; optimiser moments start afresh."""
        pi, v = items[0].policy.copy(), items[0].value.copy()
        pi.set_flat(sum(wi * b.policy.flat() for wi, b in zip(w, items)))
        v.set_flat(sum(wi * b.value.flat() for wi, b in zip(w, items)))
        return cls(pi, v, Adam(lr=items[0].opt_pi.lr), Adam(lr=items[0].opt_v.lr))

    def probs(self, x: np.ndarray) -> np.ndarray:
        return softmax(self.policy(x))


def policy_input(obs: np.ndarray, agent_ids: np.ndarray, n_agents: int, with_id: bool) -> np.ndarray:
    """Observations, optionally followed by a one-hot agent id."""
    if not with_id:
        return obs
    oh = np.zeros(obs.shape[:-1] + (n_agents,))
    np.put_along_axis(oh, np.broadcast_to(agent_ids, obs.shape[:-1])[..., None], 1.0, axis=-1)
    return np.concatenate([obs, oh], axis=-1)


@dataclass
class Learner:
    """Network store plus the agent-to-network map."""

    n_agents: int
    obs_dim: int
    with_id: bool
    assignment: NetworkAssignment
    store: dict

    @classmethod
    def build(cls, paradigm: Paradigm, n_agents: int, obs_dim: int, cfg: TrainConfig, rng) -> "Learner":
        paradigm = Paradigm(paradigm)
        with_id = paradigm is Paradigm.FPSID
        shared = paradigm in (Paradigm.FPS, Paradigm.FPSID) or (paradigm is Paradigm.HETDPS and cfg.init == "fps")
        labels = [0] * n_agents if shared else list(range(n_agents))
        assignment = NetworkAssignment.from_clusters(ClusterAssignment.from_labels(labels))
        in_dim = obs_dim + (n_agents if with_id else 0)
        store = {k: NetBundle.build(in_dim, cfg.hidden, cfg.lr, rng) for k in sorted(assignment.live)}
        return cls(n_agents, obs_dim, with_id, assignment, store)

    def owners(self) -> dict:
        out = {}
        for i, k in enumerate(self.assignment.agent_net):
            out.setdefault(k, []).append(i)
        return {k: np.asarray(v) for k, v in sorted(out.items())}

    def probs(self, obs: np.ndarray) -> np.ndarray:
        """Action distributions for ``obs`` of shape (..., n_agents, obs_dim)."""
        out = np.empty(obs.shape[:-1] + (N_ACTIONS,))
        for k, agents in self.owners().items():
            x = policy_input(obs[..., agents, :], agents, self.n_agents, self.with_id)
            out[..., agents, :] = self.store[k].probs(x)
        return out

    def values(self, obs: np.ndarray) -> np.ndarray:
        out = np.empty(obs.shape[:-1])
        for k, agents in self.owners().items():
            x = policy_input(obs[..., agents, :], agents, self.n_agents, self.with_id)
            out[..., agents] = self.store[k].value(x)[..., 0]
        return out

    def agent_policy(self, i: int, x: np.ndarray) -> np.ndarray:
        """Agent ``i``'s action probabilities at arbitrary observations ``x``."""
        b = self.store[self.assignment.agent_net[i]]
        return b.probs(policy_input(np.asarray(x, dtype=float), np.asarray(i), self.n_agents, self.with_id))

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for k, b in self.store.items():
            b.policy.save(d, f"policy_{k}")
            b.value.save(d, f"value_{k}")
        (d / "assignment.json").write_text(json.dumps(self.assignment.to_json(), indent=1))


# -- rollouts ------------------------------------------------------------------


@dataclass
class RolloutBuffer:
    obs: np.ndarray  # (T, E, n, d)
    actions: np.ndarray  # (T, E, n)
    logp: np.ndarray  # (T, E, n)
    rewards: np.ndarray  # (T, E, n)
    values: np.ndarray  # (T, E, n)
    dones: np.ndarray  # (T, E)
    last_values: np.ndarray  # (E, n)

    def __post_init__(self):
        T, E, n = self.actions.shape
        shapes = [self.obs.shape[:3], self.logp.shape, self.rewards.shape, self.values.shape]
        if any(s != (T, E, n) for s in shapes) or self.dones.shape != (T, E) or self.last_values.shape != (E, n):
            raise StructuralError("rollout buffer fields are misaligned")

    def advantages(self, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
        """GAE advantages and returns, recomputed from the stored values."""
        T = len(self.rewards)
        adv = np.zeros_like(self.rewards)
        last = np.zeros_like(self.last_values)
        for t in range(T - 1, -1, -1):
            nxt = self.last_values if t == T - 1 else self.values[t + 1]
            live = 1.0 - self.dones[t].astype(float)[:, None]
            delta = self.rewards[t] + gamma * nxt * live - self.values[t]
            last = delta + gamma * lam * live * last
            adv[t] = last
        return adv, adv + self.values


def sample_actions(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Inverse-CDF categorical draws along the last axis."""
    u = rng.random(probs.shape[:-1])[..., None]
    cdf = np.cumsum(probs, axis=-1)
    return np.minimum((u > cdf).sum(axis=-1), N_ACTIONS - 1)


@dataclass
class RolloutState:
    vec: VecSpread
    obs: np.ndarray
    rng: np.random.Generator


def collect_rollouts(state: RolloutState, learner: Learner, cfg: TrainConfig, pool: SamplePool | None = None):
    """Run ``rollout_len`` lock-stepped steps; returns (buffer, records).

    Every step also lands in ``pool`` when one is given.
    """
    T, E, n = cfg.rollout_len, state.vec.n_envs, learner.n_agents
    d = state.obs.shape[-1]
    obs = np.empty((T, E, n, d))
    acts = np.empty((T, E, n), dtype=int)
    logp = np.empty((T, E, n))
    rew = np.empty((T, E, n))
    vals = np.empty((T, E, n))
    dones = np.empty((T, E), dtype=bool)
    records = []
    for t in range(T):
        o = state.obs
        p = learner.probs(o)
        a = sample_actions(p, state.rng)
        obs[t], acts[t], vals[t] = o, a, learner.values(o)
        logp[t] = np.log(np.take_along_axis(p, a[..., None], -1)[..., 0] + 1e-12)
        step_recs = []
        state.obs, rew[t], dones[t] = state.vec.step(a, o, step_recs)
        for rec, pe in zip(step_recs, p):
            rec.action_probs = pe
        records.extend(step_recs)
    if pool is not None:
        pool.extend(records)
    buf = RolloutBuffer(obs, acts, logp, rew, vals, dones, learner.values(state.obs))
    return buf, records


# -- learner -------------------------------------------------------------------


def ppo_policy_grad(net: DenseNet, x, actions, old_logp, adv, clip: float, ent_coef: float):
    """Clipped-surrogate loss with entropy bonus; returns (loss, grads, stats)."""
    logits, cache = net.forward(x)
    p = softmax(logits)
    B = len(actions)
    logp_all = np.log(p + 1e-12)
    lp = logp_all[np.arange(B), actions]
    ratio = np.exp(lp - old_logp)
    surr = np.minimum(ratio * adv, np.clip(ratio, 1 - clip, 1 + clip) * adv)
    ent = -(p * logp_all).sum(axis=1)
    loss = float(-(surr.mean()) - ent_coef * ent.mean())
    if not np.isfinite(loss):
        raise NumericError("policy loss is not finite")
    active = np.where(adv >= 0, ratio < 1 + clip, ratio > 1 - clip)
    onehot = np.zeros_like(p)
    onehot[np.arange(B), actions] = 1.0
    g_logits = -(active * ratio * adv)[:, None] * (onehot - p)
    g_logits += ent_coef * p * (logp_all + ent[:, None])
    grads, _ = net.backward(cache, g_logits / B)
    stats = {"clip_frac": float(np.mean(np.abs(ratio - 1) > clip)), "entropy": float(ent.mean())}
    return loss, grads, stats


def value_grad(net: DenseNet, x, returns):
    v, cache = net.forward(x)
    resid = v[:, 0] - returns
    loss = float(0.5 * (resid**2).mean())
    if not np.isfinite(loss):
        raise NumericError("value loss is not finite")
    grads, _ = net.backward(cache, (resid / len(resid))[:, None])
    return loss, grads


def normalise(a: np.ndarray) -> np.ndarray:
    return (a - a.mean()) / (a.std() + 1e-8)


def learner_update(buf: RolloutBuffer, learner: Learner, cfg: TrainConfig, rng: np.random.Generator) -> dict:
    """One PPO update for every live network on the data of the agents it owns."""
    adv, ret = buf.advantages(cfg.gamma, cfg.gae_lambda)
    stats = {}
    for k, agents in learner.owners().items():
        b = learner.store[k]
        x = policy_input(buf.obs[:, :, agents], agents, learner.n_agents, learner.with_id).reshape(-1, b.policy.in_dim)
        a = buf.actions[:, :, agents].ravel()
        lp = buf.logp[:, :, agents].ravel()
        ad = adv[:, :, agents].ravel()
        rt = ret[:, :, agents].ravel()
        N = len(a)
        mb = max(1, N // cfg.minibatches)
        for _ in range(cfg.epochs):
            perm = rng.permutation(N)
            for m in range(cfg.minibatches):
                idx = perm[m * mb : (m + 1) * mb] if m < cfg.minibatches - 1 else perm[m * mb :]
                if idx.size == 0:
                    continue
                lpi, g_pi, st = ppo_policy_grad(b.policy, x[idx], a[idx], lp[idx], normalise(ad[idx]),
                                                cfg.clip, cfg.entropy_coef)
                lv, g_v = value_grad(b.value, x[idx], rt[idx])
                b.opt_pi.step(b.policy, clip_grad_norm(g_pi, cfg.max_grad_norm))
                b.opt_v.step(b.value, clip_grad_norm(g_v, cfg.max_grad_norm))
        stats[k] = {"policy_loss": lpi, "value_loss": lv, **st}
    return stats


# -- evaluation ----------------------------------------------------------------


def evaluate(policy_fn, scenario: SpreadConfig, episodes: int = 32, seed: int = 0, greedy: bool = True) -> float:
    """Mean per-agent episode return; ``policy_fn(obs (B, n, d)) -> probs``.

    Greedy selection takes the first maximising action, so a uniform policy
    always picks the no-op.
    """
    env = SpreadEnv(scenario)
    rng = np.random.default_rng(seed)
    pos, vel, lm = env.spawn(rng, episodes)
    total = np.zeros((episodes, env.n_agents))
    for _ in range(scenario.episode_len):
        p = policy_fn(env.observe_batch(pos, vel, lm))
        a = p.argmax(axis=-1) if greedy else sample_actions(p, rng)
        pos, vel, r = env.step_batch(pos, vel, lm, a)
        total += r
    return float(total.mean())


def uniform_policy(obs: np.ndarray) -> np.ndarray:
    return np.full(obs.shape[:-1] + (N_ACTIONS,), 1.0 / N_ACTIONS)


# -- training loop -------------------------------------------------------------


@dataclass
class TrainResult:
    learner: Learner
    rewards: list  # rows of (update, per-agent means..., team mean)
    periods: list  # period snapshots (dicts)
    final_reward: float
    out_dir: Path | None = None
    manifest: dict = field(default_factory=dict)

    def rewards_csv(self) -> str:
        return rewards_csv(self.rewards, self.learner.n_agents)


def rewards_csv(rows, n_agents: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["update", *[f"agent_{i}" for i in range(n_agents)], "team"])
    for row in rows:
        w.writerow([row[0], *[repr(float(v)) for v in row[1:]]])
    return buf.getvalue()


def _quantify(learner: Learner, pool: SamplePool, scenario: SpreadConfig, cfg: TrainConfig, period: int, seed: int,
              prev_clusters: ClusterAssignment):
    dm, _ = meta_distance_matrix(pool, learner.n_agents, cfg.quantify, seed=seed, scenario=scenario.scenario)
    clusters = affinity_propagation(dm)
    assignment = reconcile(learner.assignment, prev_clusters, clusters, cfg.merge_mode, rng_seed=seed, distance=dm)
    return dm, clusters, assignment


def hetdps_train(
    cfg: TrainConfig,
    scenario: SpreadConfig,
    paradigm: Paradigm | str = Paradigm.HETDPS,
    out_dir=None,
    checkpoints=(),
    on_checkpoint=None,
) -> TrainResult:
    """Train under ``paradigm``; HetDPS regroups every ``quant_period`` updates.

    ``on_checkpoint(update, learner, pool)`` fires after each update listed in
    ``checkpoints``.  With ``out_dir`` the reward curve, per-period snapshots,
    checkpoints and a manifest are written there.
    """
    paradigm = Paradigm(paradigm)
    t0 = time.time()
    ss = np.random.SeedSequence([cfg.seed, 17])
    s_net, s_env, s_act, s_upd, s_quant, s_eval = (int(c.generate_state(1)[0]) for c in ss.spawn(6))
    env = SpreadEnv(scenario)
    n = env.n_agents
    learner = Learner.build(paradigm, n, env.obs_dim, cfg, np.random.default_rng(s_net))
    vec = VecSpread(env, cfg.n_envs, seed=s_env)
    state = RolloutState(vec, vec.observe(), np.random.default_rng(s_act))
    upd_rng = np.random.default_rng(s_upd)
    pool = SamplePool(cfg.pool_capacity, n)
    clusters = ClusterAssignment.from_labels(learner.assignment.agent_net)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    rows, periods = [], []
    checkpoints = set(checkpoints)
    for update in range(1, cfg.total_updates + 1):
        buf, _ = collect_rollouts(state, learner, cfg, pool if paradigm is Paradigm.HETDPS else None)
        try:
            learner_update(buf, learner, cfg, upd_rng)
        except NumericError:
            if out is not None:
                learner.save(out / "checkpoint_nan")
            raise
        per_agent = buf.rewards.mean(axis=(0, 1)) * scenario.episode_len
        rows.append((update, *per_agent, per_agent.mean()))

        if paradigm is Paradigm.HETDPS and update % cfg.quant_period == 0:
            k = update // cfg.quant_period
            snap = {"period": k, "update": update}
            try:
                dm, new_clusters, assignment = _quantify(learner, pool, scenario, cfg, k, s_quant + k, clusters)
            except Exception as exc:  # a failed period keeps the previous grouping
                log.warning("quantification at update %d failed: %s", update, exc)
                snap.update({"error": str(exc), "labels": list(clusters.labels), **learner.assignment.to_json()})
                snap["ops"] = []
            else:
                learner.store = apply_ops(learner.store, assignment)
                learner.assignment = replace(assignment, ops=())
                clusters = new_clusters
                snap.update({"matrix": dm.values.tolist(), "labels": list(clusters.labels),
                             "converged": clusters.converged, **assignment.to_json()})
            periods.append(snap)
            if out is not None:
                (out / f"period_{k}.json").write_text(json.dumps(snap, indent=1))
                learner.save(out / f"checkpoint_{k}")
        if update in checkpoints and on_checkpoint is not None:
            on_checkpoint(update, learner, pool)

    final = evaluate(learner.probs, scenario, cfg.eval_episodes, seed=s_eval)
    result = TrainResult(learner, rows, periods, final, out)
    result.manifest = {
        "command": "train",
        "algo": paradigm.value,
        "scenario": scenario.to_json(),
        "config": cfg.to_json(),
        "seed": cfg.seed,
        "final_reward": repr(final),
        "wall_clock_s": round(time.time() - t0, 3),
    }
    if out is not None:
        (out / "rewards.csv").write_text(result.rewards_csv())
        learner.save(out / "checkpoint_final")
        result.manifest["checksums"] = checksums(out)
        (out / "manifest.json").write_text(json.dumps(result.manifest, indent=1))
    return result


def checksums(directory) -> dict:
    """sha256 of every CSV/JSON under ``directory`` (manifest excluded)."""
    d = Path(directory)
    out = {}
    for p in sorted(d.rglob("*")):
        if p.is_file() and p.suffix in (".csv", ".json") and p.name != "manifest.json":
            out[str(p.relative_to(d))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out
