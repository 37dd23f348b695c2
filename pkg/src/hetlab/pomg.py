"""Agent-level POMG data model and the shuffled transition pool.

A global state factors into per-agent local states plus an environment
block.  Transition records are stored per time step so that batch draws
break temporal correlation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from hetlab.errors import CapacityError, StructuralError

N_ACTIONS = 5
LOCAL_STATE_DIM = 4  # x, y, vx, vy
DEFAULT_POOL_CAPACITY = 50_000


def one_hot(index: int, width: int) -> np.ndarray:
    if not 0 <= index < width:
        raise StructuralError(f"index {index} outside [0, {width})")
    v = np.zeros(width)
    v[index] = 1.0
    return v


def pad_to_width(v, width: int, fill: float = 0.0) -> np.ndarray:
    """Right-pad ``v`` with ``fill`` up to ``width`` entries."""
    v = np.asarray(v, dtype=float).ravel()
    if v.size > width:
        raise StructuralError(f"vector of length {v.size} does not fit width {width}")
    out = np.full(width, float(fill))
    out[: v.size] = v
    return out


@dataclass
class GlobalState:
    """Per-agent local states (pos, vel) plus landmark positions and colours."""

    agent_states: np.ndarray  # (n, 4)
    landmarks: np.ndarray  # (L, 2)
    colors: np.ndarray  # (L,) int

    def __post_init__(self):
        self.agent_states = np.asarray(self.agent_states, dtype=float).reshape(-1, LOCAL_STATE_DIM)
        self.landmarks = np.asarray(self.landmarks, dtype=float).reshape(-1, 2)
        self.colors = np.asarray(self.colors, dtype=int).ravel()
        if self.colors.size != self.landmarks.shape[0]:
            raise StructuralError("one colour tag per landmark required")

    @property
    def n_agents(self) -> int:
        return self.agent_states.shape[0]

    @property
    def env_state(self) -> np.ndarray:
        return np.concatenate([self.landmarks, self.colors[:, None].astype(float)], axis=1).ravel()

    def split(self) -> tuple[list[np.ndarray], np.ndarray]:
        return [s.copy() for s in self.agent_states], self.env_state

    @classmethod
    def join(cls, agent_states, env_state) -> "GlobalState":
        env = np.asarray(env_state, dtype=float).reshape(-1, 3)
        return cls(np.stack([np.asarray(s, dtype=float) for s in agent_states]), env[:, :2], env[:, 2].round().astype(int))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.agent_states.ravel(), self.env_state])

    def copy(self) -> "GlobalState":
        return GlobalState(self.agent_states.copy(), self.landmarks.copy(), self.colors.copy())


@dataclass
class TransitionRecord:
    global_state: GlobalState
    joint_action: np.ndarray  # (n,) ints in [0, 5)
    observations: np.ndarray  # (n, obs_w)
    next_local_states: np.ndarray  # (n, 4)
    next_observations: np.ndarray  # (n, obs_w)
    rewards: np.ndarray  # (n,)
    action_probs: np.ndarray | None = None  # (n, 5), optional policy log

    def __post_init__(self):
        self.joint_action = np.asarray(self.joint_action, dtype=int).ravel()
        self.rewards = np.asarray(self.rewards, dtype=float).ravel()
        n = self.global_state.n_agents
        lengths = {
            "joint_action": len(self.joint_action),
            "observations": len(self.observations),
            "next_local_states": len(self.next_local_states),
            "next_observations": len(self.next_observations),
            "rewards": len(self.rewards),
        }
        if self.action_probs is not None:
            lengths["action_probs"] = len(self.action_probs)
        bad = {k: v for k, v in lengths.items() if v != n}
        if bad:
            raise StructuralError(f"record fields disagree with n_agents={n}: {bad}")
        if np.any((self.joint_action < 0) | (self.joint_action >= N_ACTIONS)):
            raise StructuralError("action index out of range")
        if not np.all(np.isfinite(self.rewards)):
            raise StructuralError("rewards must be finite")

    @property
    def n_agents(self) -> int:
        return self.global_state.n_agents

    def to_json(self) -> dict:
        d = {
            "gs": {"agents": self.global_state.agent_states.tolist(), "env": self.global_state.env_state.tolist()},
            "ja": self.joint_action.tolist(),
            "obs": np.asarray(self.observations).tolist(),
            "ns": np.asarray(self.next_local_states).tolist(),
            "nobs": np.asarray(self.next_observations).tolist(),
            "r": self.rewards.tolist(),
        }
        if self.action_probs is not None:
            d["probs"] = np.asarray(self.action_probs).tolist()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TransitionRecord":
        gs = GlobalState.join(d["gs"]["agents"], d["gs"]["env"])
        probs = d.get("probs")
        return cls(
            gs,
            d["ja"],
            np.asarray(d["obs"], dtype=float),
            np.asarray(d["ns"], dtype=float),
            np.asarray(d["nobs"], dtype=float),
            d["r"],
            None if probs is None else np.asarray(probs, dtype=float),
        )


@dataclass
class SamplePool:
    """FIFO ring buffer of transition records.

    Single writer.  ``sample_batch`` never mutates the pool, so concurrent
    draws with different seeds are safe.
    """

    capacity: int = DEFAULT_POOL_CAPACITY
    n_agents: int | None = None
    _records: list = field(default_factory=list, repr=False)
    _head: int = 0

    def __len__(self) -> int:
        return len(self._records)

    def insert(self, rec: TransitionRecord) -> "SamplePool":
        if self.n_agents is None:
            self.n_agents = rec.n_agents
        elif rec.n_agents != self.n_agents:
            raise StructuralError(f"record has {rec.n_agents} agents, pool holds {self.n_agents}")
        if len(self._records) < self.capacity:
            self._records.append(rec)
        else:
            self._records[self._head] = rec
            self._head = (self._head + 1) % self.capacity
        return self

    def extend(self, recs: Iterable[TransitionRecord]) -> "SamplePool":
        for r in recs:
            self.insert(r)
        return self

    def records(self) -> list[TransitionRecord]:
        """Records in insertion order, oldest first."""
        return self._records[self._head:] + self._records[: self._head]

    def __iter__(self) -> Iterator[TransitionRecord]:
        return iter(self.records())

    def sample_indices(self, k: int, seed) -> np.ndarray:
        if k > len(self):
            raise CapacityError(f"asked for {k} records, pool holds {len(self)}")
        rng = np.random.default_rng(seed)
        return rng.choice(len(self), size=k, replace=False)

    def sample_batch(self, k: int, seed) -> list[TransitionRecord]:
        return [self._records[i] for i in self.sample_indices(k, seed)]


def pool_insert(pool: SamplePool, rec: TransitionRecord) -> SamplePool:
    return pool.insert(rec)


def pool_sample_batch(pool: SamplePool, k: int, seed) -> list[TransitionRecord]:
    return pool.sample_batch(k, seed)


class TrajectoryFormatError(StructuralError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def write_trajectories(path, records: Iterable[TransitionRecord], header: dict | None = None) -> None:
    records = list(records)
    if not records:
        raise CapacityError("no records to write")
    r0 = records[0]
    head = {
        "n_agents": r0.n_agents,
        "dims": {
            "local_state": LOCAL_STATE_DIM,
            "obs": int(np.asarray(r0.observations).shape[1]),
            "n_landmarks": int(r0.global_state.landmarks.shape[0]),
            "n_actions": N_ACTIONS,
        },
    }
    head.update(header or {})
    with open(path, "w") as fh:
        fh.write(json.dumps(head) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_json()) + "\n")


def read_trajectories(path) -> tuple[dict, list[TransitionRecord]]:
    """Parse a JSONL trajectory log; raises TrajectoryFormatError with the line number."""
    path = Path(path)
    records = []
    with open(path) as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise TrajectoryFormatError(1, "empty file")
    try:
        header = json.loads(lines[0])
        n = int(header["n_agents"])
        obs_w = int(header["dims"]["obs"])
    except (ValueError, KeyError, TypeError) as exc:
        raise TrajectoryFormatError(1, f"bad header ({exc})") from None
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            rec = TransitionRecord.from_json(json.loads(line))
        except (ValueError, KeyError, TypeError) as exc:
            raise TrajectoryFormatError(lineno, str(exc) or type(exc).__name__) from None
        if rec.n_agents != n or np.asarray(rec.observations).shape[1] != obs_w:
            raise TrajectoryFormatError(lineno, "record shape disagrees with header")
        records.append(rec)
    if not records:
        raise TrajectoryFormatError(1, "header without records")
    return header, records
