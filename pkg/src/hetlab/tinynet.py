"""Small dense networks with hand-written backward passes.

Everything is float64 numpy.  ``forward`` returns the output together with
a cache object; ``backward`` consumes that cache, so concurrent read-only
forwards on one network never interfere.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from hetlab.errors import NumericError, StateError, StructuralError

LOG_SIGMA_MIN = -5.0
LOG_SIGMA_MAX = 2.0
ACTIVATIONS = ("tanh", "identity")


@dataclass
class DenseNet:
    """Stack of affine layers, each followed by ``tanh`` or ``identity``."""

    weights: list
    biases: list
    activations: list

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise StructuralError("weights, biases and activations must align")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise StructuralError(f"unknown activation {a!r}")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[1] != b.shape[0]:
                raise StructuralError(f"layer {k}: bias width {b.shape[0]} != {W.shape[1]}")
            if k and self.weights[k - 1].shape[1] != W.shape[0]:
                raise StructuralError(f"layer {k} input {W.shape[0]} != previous output")

    @classmethod
    def build(cls, sizes, rng=None, hidden="tanh", output="identity", out_gain=1.0) -> "DenseNet":
        """Glorot-uniform weights, zero biases.  ``sizes`` = [in, h1, ..., out]."""
        rng = np.random.default_rng(rng)
        ws, bs, acts = [], [], []
        for k, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = k == len(sizes) - 2
            lim = np.sqrt(6.0 / (a + b)) * (out_gain if last else 1.0)
            ws.append(rng.uniform(-lim, lim, (a, b)))
            bs.append(np.zeros(b))
            acts.append(output if last else hidden)
        return cls(ws, bs, acts)

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @property
    def n_params(self) -> int:
        return sum(p.size for p in self.params)

    def copy(self) -> "DenseNet":
        return copy.deepcopy(self)

    def forward(self, x):
        """Returns ``(y, cache)``; ``x`` may be a vector or a (batch, in) matrix."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None]
        if x.shape[-1] != self.in_dim:
            raise StructuralError(f"input width {x.shape[-1]} != network input {self.in_dim}")
        inputs, outs = [], []
        h = x
        for W, b, act in zip(self.weights, self.biases, self.activations):
            inputs.append(h)
            h = h @ W + b
            if act == "tanh":
                h = np.tanh(h)
            outs.append(h)
        cache = ForwardCache(inputs, outs, squeeze)
        return (h[0] if squeeze else h), cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache: "ForwardCache | None", upstream):
        """Gradients of ``sum(y * upstream)`` w.r.t. parameters and input."""
        if cache is None:
            raise StateError("backward called without a forward cache")
        g = np.asarray(upstream, dtype=float)
        if cache.squeeze:
            g = g[None]
        grads_w, grads_b = [None] * len(self.weights), [None] * len(self.weights)
        for k in range(len(self.weights) - 1, -1, -1):
            if self.activations[k] == "tanh":
                g = g * (1.0 - cache.outputs[k] ** 2)
            grads_w[k] = cache.inputs[k].T @ g
            grads_b[k] = g.sum(axis=0)
            g = g @ self.weights[k].T
        return GradBuffer(grads_w, grads_b), (g[0] if cache.squeeze else g)

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def set_flat(self, v) -> None:
        v = np.asarray(v, dtype=float)
        if v.size != self.n_params:
            raise StructuralError(f"flat vector has {v.size} entries, network has {self.n_params}")
        off = 0
        for p in self.params:
            p[...] = v[off : off + p.size].reshape(p.shape)
            off += p.size

    def manifest(self) -> dict:
        return {
            "layers": [
                {"in": int(W.shape[0]), "out": int(W.shape[1]), "activation": a}
                for W, a in zip(self.weights, self.activations)
            ],
            "dtype": "<f4",
            "n_params": self.n_params,
        }

    def to_bytes(self) -> bytes:
        return self.flat().astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, manifest: dict, data: bytes) -> "DenseNet":
        layers = manifest["layers"]
        net = cls(
            [np.zeros((l["in"], l["out"])) for l in layers],
            [np.zeros(l["out"]) for l in layers],
            [l["activation"] for l in layers],
        )
        net.set_flat(np.frombuffer(data, dtype="<f4").astype(float))
        return net

    def save(self, directory, name: str = "net") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{name}.json").write_text(json.dumps(self.manifest(), indent=1))
        (d / f"{name}.f32").write_bytes(self.to_bytes())

    @classmethod
    def load(cls, directory, name: str = "net") -> "DenseNet":
        d = Path(directory)
        return cls.from_bytes(json.loads((d / f"{name}.json").read_text()), (d / f"{name}.f32").read_bytes())


@dataclass
class ForwardCache:
    inputs: list
    outputs: list
    squeeze: bool = False


@dataclass
class GradBuffer:
    weights: list
    biases: list

    @property
    def params(self) -> list:
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    def __add__(self, other: "GradBuffer") -> "GradBuffer":
        return GradBuffer(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scale(self, c: float) -> "GradBuffer":
        return GradBuffer([w * c for w in self.weights], [b * c for b in self.biases])

    def norm(self) -> float:
        return float(np.sqrt(sum((p**2).sum() for p in self.params)))

    @classmethod
    def zeros_like(cls, net: DenseNet) -> "GradBuffer":
        return cls([np.zeros_like(W) for W in net.weights], [np.zeros_like(b) for b in net.biases])


@dataclass
class GaussianHead:
    """Diagonal Gaussian; ``log_sigma`` is kept inside [-5, 2]."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=float)
        self.log_sigma = np.clip(np.asarray(self.log_sigma, dtype=float), LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        if self.mu.shape != self.log_sigma.shape:
            raise StructuralError("mu and log_sigma widths differ")

    @property
    def sigma(self) -> np.ndarray:
        return np.exp(self.log_sigma)

    @classmethod
    def from_raw(cls, raw: np.ndarray) -> "GaussianHead":
        """Split a network output [mu | log_sigma] along the last axis."""
        d = raw.shape[-1] // 2
        return cls(raw[..., :d], raw[..., d:])


def reparam_sample(head: GaussianHead, eps) -> np.ndarray:
    eps = np.asarray(eps, dtype=float)
    if eps.shape[-1] != head.mu.shape[-1]:
        raise StructuralError("eps width differs from head width")
    return head.mu + head.sigma * eps


def kl_to_standard_normal(head: GaussianHead) -> np.ndarray:
    """KL(N(mu, sigma^2) || N(0, I)) summed over the last axis."""
    # expm1 keeps sigma^2 - 1 - 2 log sigma >= 0 when log sigma is tiny
    per_dim = np.maximum(np.expm1(2.0 * head.log_sigma) - 2.0 * head.log_sigma, 0.0)
    return 0.5 * (head.mu**2 + per_dim).sum(axis=-1)


@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def step(self, net: DenseNet, grads: GradBuffer) -> DenseNet:
        params, gs = net.params, grads.params
        if len(params) != len(gs) or any(p.shape != g.shape for p, g in zip(params, gs)):
            raise StructuralError("gradient buffer does not mirror the network")
        for g in gs:
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient; aborting update")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, gs, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return net

    def copy(self) -> "Adam":
        return copy.deepcopy(self)


def optim_step(net: DenseNet, grads: GradBuffer, state: Adam) -> DenseNet:
    return state.step(net, grads)


def clip_grad_norm(grads: GradBuffer, max_norm: float) -> GradBuffer:
    n = grads.norm()
    if n > max_norm:
        return grads.scale(max_norm / (n + 1e-12))
    return grads
