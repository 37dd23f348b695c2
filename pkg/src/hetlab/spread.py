"""Deterministic 2-D particle spread scenario.

Two families of configurations live here: the four-agent case study with
variants ``v1``..``v6`` (plus the homogeneous ``base``), and the coloured
spreading tasks ``15a_3c``, ``30a_3c``, ``15a_5c``, ``30a_5c``.

All physics, observation and reward kernels are written over a leading
batch axis so the same code serves single environments, vectorised
rollouts and the per-agent oracles used for model-based quantification.
Oracles evaluate agent ``i``'s local rule from a designated probe slot of
a global state, so two agents are always compared at literally the same
condition.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from hetlab.errors import StructuralError
from hetlab.pomg import N_ACTIONS, GlobalState, TransitionRecord

DT = 0.1
ACCEL = 5.0
DAMPING = 0.75
FORCE_SCALE = 0.05
FORCE_MIN_R = 0.1
FORCE_RADIUS = 0.5
POS_LIMIT = 1.2
SPAWN_RADIUS = 0.25
LANDMARK_RADII = (0.6, 0.9)
MAX_NEIGHBOURS = 9
FORMATION_RADIUS = 0.2
FORMATION_BONUS = 0.5

# no-op, +x, -x, +y, -y
ACTION_DIRS = np.array([[0.0, 0.0], [1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])

CASE_STUDY_VARIANTS = ("base", "v1", "v2", "v3", "v4", "v5", "v6")
PMS_TASKS = {
    "15a_3c": (5, 5, 5),
    "30a_3c": (10, 10, 10),
    "15a_5c": (3, 3, 3, 3, 3),
    "30a_5c": (3, 3, 3, 12, 9),
}
SCENARIOS = CASE_STUDY_VARIANTS + tuple(PMS_TASKS)


@dataclass(frozen=True)
class SpreadConfig:
    """Scenario descriptor.  Agents are laid out contiguously by group.

    ``target`` holds one landmark index per group, or -1 for "nearest
    landmark".  ``obs_permutation`` reorders the entity blocks (landmarks
    first, then neighbours by distance) of each group's observation.
    """

    scenario: str
    group_sizes: tuple
    max_speed: tuple
    force_sign: tuple
    target: tuple
    landmark_colors: tuple
    obs_permutation: tuple = ()
    formation_bonus: bool = False
    episode_len: int = 25
    seed: int = 0

    def __post_init__(self):
        g = len(self.group_sizes)
        for name in ("max_speed", "force_sign", "target"):
            if len(getattr(self, name)) != g:
                raise StructuralError(f"{name} needs one entry per group ({g})")
        if any(s <= 0 for s in self.group_sizes):
            raise StructuralError("group sizes must be positive")
        if any(s not in (-1, 0, 1) for s in self.force_sign):
            raise StructuralError("force_sign entries must be -1, 0 or +1")
        if any(not -1 <= t < self.n_landmarks for t in self.target):
            raise StructuralError("target landmark out of range")
        if not self.obs_permutation:
            ident = tuple(range(self.n_entities))
            object.__setattr__(self, "obs_permutation", tuple(ident for _ in range(g)))
        if len(self.obs_permutation) != g:
            raise StructuralError("obs_permutation needs one entry per group")
        for p in self.obs_permutation:
            if sorted(p) != list(range(self.n_entities)):
                raise StructuralError(f"obs permutation {p} is not a bijection on {self.n_entities} blocks")
        object.__setattr__(self, "obs_permutation", tuple(tuple(int(i) for i in p) for p in self.obs_permutation))

    @property
    def n_agents(self) -> int:
        return int(sum(self.group_sizes))

    @property
    def n_groups(self) -> int:
        return len(self.group_sizes)

    @property
    def n_landmarks(self) -> int:
        return len(self.landmark_colors)

    @property
    def n_colors(self) -> int:
        return int(max(self.landmark_colors)) + 1

    @property
    def n_neighbours(self) -> int:
        return min(MAX_NEIGHBOURS, self.n_agents - 1)

    @property
    def n_entities(self) -> int:
        return self.n_landmarks + self.n_neighbours

    @property
    def obs_dim(self) -> int:
        return 4 + self.n_landmarks * (2 + self.n_colors) + 2 * self.n_neighbours

    @property
    def groups(self) -> np.ndarray:
        """Group index of every agent slot."""
        return np.repeat(np.arange(self.n_groups), self.group_sizes)

    def with_seed(self, seed: int) -> "SpreadConfig":
        return replace(self, seed=int(seed))

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SpreadConfig":
        d = dict(d)
        for k in ("group_sizes", "max_speed", "force_sign", "target", "landmark_colors"):
            d[k] = tuple(d[k])
        d["obs_permutation"] = tuple(tuple(p) for p in d.get("obs_permutation", ()))
        return cls(**d)

    @classmethod
    def load(cls, path) -> "SpreadConfig":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def case_study(variant: str, seed: int = 0, episode_len: int = 25) -> SpreadConfig:
    """Two groups of two agents, two landmarks.

    v1 shuffles group B's observation blocks, v2 slows group B down, v3
    gives the groups opposite force fields, v4 gives each group its own
    landmark, v5 = v1 + v4, v6 = all four.
    """
    if variant not in CASE_STUDY_VARIANTS:
        raise StructuralError(f"unknown case-study variant {variant!r}")
    obs_het = variant in ("v1", "v5", "v6")
    speed_het = variant in ("v2", "v6")
    force_het = variant in ("v3", "v6")
    goal_het = variant in ("v4", "v5", "v6")
    n_entities = 2 + 3
    ident = tuple(range(n_entities))
    return SpreadConfig(
        scenario=variant,
        group_sizes=(2, 2),
        max_speed=(1.0, 0.3) if speed_het else (1.0, 1.0),
        force_sign=(1, -1) if force_het else (0, 0),
        target=(0, 1) if goal_het else (-1, -1),
        landmark_colors=(0, 1),
        obs_permutation=(ident, ident[::-1]) if obs_het else (ident, ident),
        formation_bonus=False,
        episode_len=episode_len,
        seed=seed,
    )


def pms_task(task: str, seed: int = 0, episode_len: int = 25) -> SpreadConfig:
    if task not in PMS_TASKS:
        raise StructuralError(f"unknown PMS task {task!r}")
    sizes = PMS_TASKS[task]
    c = len(sizes)
    return SpreadConfig(
        scenario=task,
        group_sizes=sizes,
        max_speed=(1.0,) * c,
        force_sign=(0,) * c,
        target=tuple(range(c)),
        landmark_colors=tuple(range(c)),
        formation_bonus=True,
        episode_len=episode_len,
        seed=seed,
    )


def make_config(scenario: str, seed: int = 0, **overrides) -> SpreadConfig:
    if scenario in CASE_STUDY_VARIANTS:
        cfg = case_study(scenario, seed)
    elif scenario in PMS_TASKS:
        cfg = pms_task(scenario, seed)
    else:
        raise StructuralError(f"unknown scenario {scenario!r}; choose from {', '.join(SCENARIOS)}")
    return replace(cfg, **overrides) if overrides else cfg


# ---------------------------------------------------------------------------
# batched kernels: pos/vel are (B, n, 2), landmarks (B, L, 2)
# ---------------------------------------------------------------------------


def ambient_forces(pos: np.ndarray, signs: np.ndarray) -> np.ndarray:
    """Velocity increment on every agent from every other agent's field.

    Source m pushes receiver k along (p_k - p_m) with magnitude
    sign_m * 0.05 / max(r, 0.1) when r < 0.5; +1 repels, -1 attracts.
    """
    diff = pos[:, :, None, :] - pos[:, None, :, :]  # [b, k, m] = p_k - p_m
    r = np.sqrt((diff**2).sum(-1))
    n = pos.shape[1]
    active = (r < FORCE_RADIUS) & (r > 0.0) & ~np.eye(n, dtype=bool)[None]
    mag = np.where(active, signs[None, None, :] * FORCE_SCALE / np.maximum(r, FORCE_MIN_R), 0.0)
    unit = diff / np.where(r > 0.0, r, 1.0)[..., None]
    return (mag[..., None] * unit).sum(axis=2)


def integrate(pos, vel, actions, max_speed, force_sign):
    """One physics step for every agent; returns (next_pos, next_vel)."""
    actions = np.asarray(actions)
    if np.any((actions < 0) | (actions >= N_ACTIONS)):
        raise StructuralError("action index out of range")
    v = DAMPING * vel + ACCEL * DT * ACTION_DIRS[actions]
    if np.any(force_sign != 0):
        v = v + ambient_forces(pos, np.asarray(force_sign, dtype=float))
    speed = np.sqrt((v**2).sum(-1))
    cap = np.broadcast_to(np.asarray(max_speed, dtype=float), speed.shape)
    scale = np.where(speed > cap, cap / np.where(speed > 0, speed, 1.0), 1.0)
    v = v * scale[..., None]
    p = np.clip(pos + v * DT, -POS_LIMIT, POS_LIMIT)
    return p, v


def _block_columns(cfg: SpreadConfig) -> np.ndarray:
    """Per-group column index arrays realising each block permutation."""
    lm_w = 2 + cfg.n_colors
    starts, widths = [], []
    off = 4
    for _ in range(cfg.n_landmarks):
        starts.append(off)
        widths.append(lm_w)
        off += lm_w
    for _ in range(cfg.n_neighbours):
        starts.append(off)
        widths.append(2)
        off += 2
    cols = []
    for perm in cfg.obs_permutation:
        idx = [0, 1, 2, 3]
        for b in perm:
            idx.extend(range(starts[b], starts[b] + widths[b]))
        cols.append(idx)
    return np.asarray(cols, dtype=int)


def canonical_observations(pos, vel, landmarks, colors, n_colors: int, n_neighbours: int) -> np.ndarray:
    """Unpermuted observation of every slot: (B, n, obs_dim)."""
    B, n, _ = pos.shape
    L = landmarks.shape[1]
    rel_lm = landmarks[:, None, :, :] - pos[:, :, None, :]  # (B, n, L, 2)
    onehot = np.zeros((L, n_colors))
    onehot[np.arange(L), colors] = 1.0
    lm = np.concatenate([rel_lm, np.broadcast_to(onehot, (B, n, L, n_colors))], axis=-1)
    parts = [vel, pos, lm.reshape(B, n, -1)]
    if n_neighbours:
        rel = pos[:, None, :, :] - pos[:, :, None, :]  # [b, p, m] = p_m - p_p
        d = (rel**2).sum(-1)
        d[:, np.arange(n), np.arange(n)] = np.inf
        order = np.argsort(d, axis=-1, kind="stable")[..., :n_neighbours]
        near = np.take_along_axis(rel, order[..., None], axis=2)
        parts.append(near.reshape(B, n, -1))
    return np.concatenate(parts, axis=-1)


def reward_kernel(pos, landmarks, slot_groups, member_groups, cfg: SpreadConfig) -> np.ndarray:
    """Reward of every slot under the rule of ``slot_groups[slot]``.

    ``member_groups`` decides who counts as a teammate for the formation
    bonus.  Returns (B, n).
    """
    d = np.sqrt(((pos[:, :, None, :] - landmarks[:, None, :, :]) ** 2).sum(-1))  # (B, n, L)
    targets = np.asarray(cfg.target)[slot_groups]  # (n,)
    nearest = d.min(axis=-1)
    tgt = np.where(targets >= 0, targets, 0)
    assigned = np.take_along_axis(d, np.broadcast_to(tgt[None, :, None], d.shape[:2] + (1,)), axis=-1)[..., 0]
    r = -np.where(targets[None, :] >= 0, assigned, nearest)
    if cfg.formation_bonus:
        n = pos.shape[1]
        mate = (member_groups[None, :] == slot_groups[:, None]) & ~np.eye(n, dtype=bool)  # [p, m]
        # distance of agent m to the landmark targeted by slot p's rule
        dm = d[:, :, tgt]  # (B, m, p)
        near = (dm < FORMATION_RADIUS).transpose(0, 2, 1)  # (B, p, m)
        count = mate.sum(-1)
        frac = np.where(count > 0, (near & mate[None]).sum(-1) / np.maximum(count, 1), 0.0)
        r = r + FORMATION_BONUS * frac
    return r


@dataclass
class EnvState:
    global_state: GlobalState
    t: int = 0


class SpreadEnv:
    """Single-instance simulator with model-based oracle queries."""

    def __init__(self, cfg: SpreadConfig):
        self.cfg = cfg
        self.groups = cfg.groups
        self.speeds = np.asarray(cfg.max_speed, dtype=float)[self.groups]
        self.signs = np.asarray(cfg.force_sign, dtype=float)[self.groups]
        self.colors = np.asarray(cfg.landmark_colors, dtype=int)
        self._cols = _block_columns(cfg)

    @property
    def n_agents(self) -> int:
        return self.cfg.n_agents

    @property
    def obs_dim(self) -> int:
        return self.cfg.obs_dim

    def spawn(self, rng: np.random.Generator, batch: int = 1):
        n, L = self.cfg.n_agents, self.cfg.n_landmarks
        r = SPAWN_RADIUS * np.sqrt(rng.random((batch, n)))
        th = rng.uniform(0.0, 2 * np.pi, (batch, n))
        pos = np.stack([r * np.cos(th), r * np.sin(th)], axis=-1)
        # each landmark owns an angular sector of the annulus
        centre = 2 * np.pi * np.arange(L) / L
        ang = centre[None, :] + rng.uniform(-np.pi / (2 * L), np.pi / (2 * L), (batch, L))
        rad = np.sqrt(rng.uniform(LANDMARK_RADII[0] ** 2, LANDMARK_RADII[1] ** 2, (batch, L)))
        lm = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=-1)
        return pos, np.zeros_like(pos), lm

    def reset(self, seed=None) -> EnvState:
        rng = np.random.default_rng(self.cfg.seed if seed is None else seed)
        pos, vel, lm = self.spawn(rng)
        return EnvState(GlobalState(np.concatenate([pos[0], vel[0]], axis=1), lm[0], self.colors), 0)

    # -- batched helpers --------------------------------------------------
    def observe_batch(self, pos, vel, landmarks, rule_groups=None) -> np.ndarray:
        canon = canonical_observations(pos, vel, landmarks, self.colors, self.cfg.n_colors, self.cfg.n_neighbours)
        g = self.groups if rule_groups is None else np.asarray(rule_groups)
        cols = self._cols[g]  # (n, W)
        return np.take_along_axis(canon, np.broadcast_to(cols[None], canon.shape), axis=-1)

    def reward_batch(self, pos, landmarks, rule_groups=None) -> np.ndarray:
        g = self.groups if rule_groups is None else np.asarray(rule_groups)
        return reward_kernel(pos, landmarks, g, self.groups, self.cfg)

    def step_batch(self, pos, vel, landmarks, actions):
        rewards = self.reward_batch(pos, landmarks)
        npos, nvel = integrate(pos, vel, actions, self.speeds, self.signs)
        return npos, nvel, rewards

    # -- single-instance API ----------------------------------------------
    @staticmethod
    def _arrays(gs: GlobalState):
        a = gs.agent_states
        return a[None, :, :2], a[None, :, 2:], gs.landmarks[None]

    def observe(self, state: EnvState | GlobalState) -> np.ndarray:
        gs = state.global_state if isinstance(state, EnvState) else state
        pos, vel, lm = self._arrays(gs)
        return self.observe_batch(pos, vel, lm)[0]

    def step(self, state: EnvState, ja):
        """Advance one step; returns (next_state, next_observations, rewards, done)."""
        if state.t >= self.cfg.episode_len:
            raise StructuralError("episode already finished")
        ja = np.asarray(ja, dtype=int).ravel()
        if ja.size != self.n_agents:
            raise StructuralError(f"joint action has {ja.size} entries, expected {self.n_agents}")
        pos, vel, lm = self._arrays(state.global_state)
        npos, nvel, r = self.step_batch(pos, vel, lm, ja[None])
        gs = GlobalState(np.concatenate([npos[0], nvel[0]], axis=1), lm[0], self.colors)
        nxt = EnvState(gs, state.t + 1)
        return nxt, self.observe(gs), r[0], nxt.t >= self.cfg.episode_len

    def transition(self, state: EnvState, ja) -> tuple[EnvState, TransitionRecord, bool]:
        obs = self.observe(state)
        nxt, nobs, r, done = self.step(state, ja)
        rec = TransitionRecord(
            state.global_state.copy(), ja, obs, nxt.global_state.agent_states.copy(), nobs, r
        )
        return nxt, rec, done

    # -- oracles: agent i's rule evaluated from probe slot ------------------
    def _slot(self, i: int, slot) -> int:
        if not 0 <= i < self.n_agents:
            raise StructuralError(f"agent {i} out of range")
        p = i if slot is None else int(slot)
        if not 0 <= p < self.n_agents:
            raise StructuralError(f"probe slot {p} out of range")
        return p

    def oracle_observe_batch(self, i: int, pos, vel, landmarks, slot=None) -> np.ndarray:
        p = self._slot(i, slot)
        rule = self.groups.copy()
        rule[p] = self.groups[i]
        return self.observe_batch(pos, vel, landmarks, rule)[:, p]

    def oracle_transition_batch(self, i: int, pos, vel, actions, slot=None) -> np.ndarray:
        p = self._slot(i, slot)
        speeds = self.speeds.copy()
        speeds[p] = self.speeds[i]
        npos, nvel = integrate(pos, vel, actions, speeds, self.signs)
        return np.concatenate([npos[:, p], nvel[:, p]], axis=-1)

    def oracle_effect_batch(self, i: int, pos, vel, actions, slot=None) -> np.ndarray:
        p = self._slot(i, slot)
        signs = self.signs.copy()
        signs[p] = self.signs[i]
        npos, nvel = integrate(pos, vel, actions, self.speeds, signs)
        keep = np.arange(self.n_agents) != p
        return np.concatenate([npos[:, keep], nvel[:, keep]], axis=-1).reshape(len(pos), -1)

    def oracle_reward_batch(self, i: int, pos, landmarks, slot=None) -> np.ndarray:
        p = self._slot(i, slot)
        rule = self.groups.copy()
        rule[p] = self.groups[i]
        return self.reward_batch(pos, landmarks, rule)[:, p]

    def oracle_observe(self, i: int, probe: GlobalState, slot=None) -> np.ndarray:
        pos, vel, lm = self._arrays(probe)
        return self.oracle_observe_batch(i, pos, vel, lm, slot)[0]

    def oracle_transition(self, i: int, probe: GlobalState, ja, slot=None) -> np.ndarray:
        """Next local state (pos, vel) of the probe slot moved by agent i's rules."""
        pos, vel, _ = self._arrays(probe)
        return self.oracle_transition_batch(i, pos, vel, np.asarray(ja, dtype=int)[None], slot)[0]

    def oracle_effect(self, i: int, probe: GlobalState, ja, slot=None) -> np.ndarray:
        """Next local states of every non-probe agent, concatenated, when the
        probe slot carries agent i's force field."""
        pos, vel, _ = self._arrays(probe)
        return self.oracle_effect_batch(i, pos, vel, np.asarray(ja, dtype=int)[None], slot)[0]

    def oracle_reward(self, i: int, probe: GlobalState, ja=None, slot=None) -> float:
        pos, _, lm = self._arrays(probe)
        return float(self.oracle_reward_batch(i, pos, lm, slot)[0])


@dataclass
class VecSpread:
    """``n_envs`` lock-stepped copies of one scenario with automatic resets."""

    env: SpreadEnv
    n_envs: int
    seed: int = 0
    pos: np.ndarray = field(init=False)
    vel: np.ndarray = field(init=False)
    landmarks: np.ndarray = field(init=False)
    t: np.ndarray = field(init=False)

    def __post_init__(self):
        self.rng = np.random.default_rng(self.seed)
        self.pos, self.vel, self.landmarks = self.env.spawn(self.rng, self.n_envs)
        self.t = np.zeros(self.n_envs, dtype=int)

    def observe(self) -> np.ndarray:
        return self.env.observe_batch(self.pos, self.vel, self.landmarks)

    def global_state(self, e: int) -> GlobalState:
        return GlobalState(np.concatenate([self.pos[e], self.vel[e]], axis=1), self.landmarks[e].copy(), self.env.colors)

    def step(self, actions: np.ndarray, obs: np.ndarray | None = None, records: list | None = None):
        """Step all envs.  Returns (next_obs_after_reset, rewards, dones).

        When ``records`` is a list, one TransitionRecord per env is appended
        (next observations taken before any reset).
        """
        if obs is None:
            obs = self.observe()
        npos, nvel, r = self.env.step_batch(self.pos, self.vel, self.landmarks, actions)
        nobs = self.env.observe_batch(npos, nvel, self.landmarks)
        if records is not None:
            for e in range(self.n_envs):
                records.append(
                    TransitionRecord(
                        self.global_state(e),
                        actions[e],
                        obs[e],
                        np.concatenate([npos[e], nvel[e]], axis=1),
                        nobs[e],
                        r[e],
                    )
                )
        self.pos, self.vel = npos, nvel
        self.t = self.t + 1
        dones = self.t >= self.env.cfg.episode_len
        if dones.any():
            idx = np.flatnonzero(dones)
            p, v, lm = self.env.spawn(self.rng, idx.size)
            self.pos[idx], self.vel[idx], self.landmarks[idx] = p, v, lm
            self.t[idx] = 0
            nobs = nobs.copy()
            nobs[idx] = self.env.observe_batch(p, v, lm)
        return nobs, r, dones


def scripted_actions(env: SpreadEnv, pos: np.ndarray, landmarks: np.ndarray) -> np.ndarray:
    """Greedy go-to-target controller: move along the axis of larger offset."""
    tgt = np.asarray(env.cfg.target)[env.groups]  # (n,)
    d = landmarks[:, None, :, :] - pos[:, :, None, :]  # (B, n, L, 2)
    dist = (d**2).sum(-1)
    pick = np.where(tgt[None, :] >= 0, tgt[None, :], dist.argmin(-1))
    off = np.take_along_axis(d, pick[..., None, None].repeat(2, -1), axis=2)[:, :, 0]
    ax = np.abs(off).argmax(-1)
    sgn = np.take_along_axis(off, ax[..., None], -1)[..., 0] >= 0
    act = np.where(ax == 0, np.where(sgn, 1, 2), np.where(sgn, 3, 4))
    close = np.sqrt((off**2).sum(-1)) < 0.05
    return np.where(close, 0, act)


def collect_pool(cfg: SpreadConfig, episodes: int, seed: int = 0, scripted_frac: float = 0.5, n_envs: int = 8, pool=None):
    """Fill a SamplePool by mixing scripted and uniform-random actions per agent-step."""
    from hetlab.pomg import SamplePool

    env = SpreadEnv(cfg)
    pool = SamplePool() if pool is None else pool
    rng = np.random.default_rng(seed)
    vec = VecSpread(env, n_envs, seed=int(rng.integers(2**31)))
    steps = int(np.ceil(episodes / n_envs)) * cfg.episode_len
    obs = vec.observe()
    for _ in range(steps):
        scripted = scripted_actions(env, vec.pos, vec.landmarks)
        rand = rng.integers(0, N_ACTIONS, scripted.shape)
        acts = np.where(rng.random(scripted.shape) < scripted_frac, scripted, rand)
        recs: list = []
        obs, _, _ = vec.step(acts, obs, recs)
        pool.extend(recs)
    return pool
