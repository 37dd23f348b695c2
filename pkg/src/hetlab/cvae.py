"""Conditional VAE in reconstruction (model-based) and prediction (model-free) form.

Model-based: encoder f(z | y, x), decoder g(y | z, x).
Model-free:  encoder f(z | i, x) with a one-hot agent id, decoder g(y | z, x)
by default.  Feeding the id to the decoder as well (``decoder_sees_id``)
lets the decoder bypass the latent entirely, and the posterior then
collapses onto the prior for every agent.

The decoder likelihood is a unit-variance Gaussian, so the negative ELBO
becomes per-dimension MSE plus ``beta`` times the KL to N(0, I).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from hetlab.errors import CapacityError, NumericError, StructuralError
from hetlab.tinynet import (
    LOG_SIGMA_MAX,
    LOG_SIGMA_MIN,
    Adam,
    DenseNet,
    GaussianHead,
    GradBuffer,
    kl_to_standard_normal,
)

MODEL_BASED = "model_based"
MODEL_FREE = "model_free"


@dataclass(frozen=True)
class CvaeConfig:
    hidden: tuple = (64, 64)
    latent_dim: int = 8
    steps: int = 2000
    batch_size: int = 256
    lr: float = 1e-3
    beta: float = 1.0
    normalize: bool = True
    decoder_sees_id: bool = False

    def with_(self, **kw) -> "CvaeConfig":
        return replace(self, **kw)


@dataclass
class CvaeBatch:
    x: np.ndarray
    y: np.ndarray
    ids: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, dtype=float))
        self.y = np.atleast_2d(np.asarray(self.y, dtype=float))
        if self.ids is not None:
            self.ids = np.asarray(self.ids, dtype=int).ravel()
        rows = {len(self.x), len(self.y)} | ({len(self.ids)} if self.ids is not None else set())
        if len(rows) != 1:
            raise StructuralError(f"batch row counts disagree: {sorted(rows)}")

    def __len__(self) -> int:
        return len(self.x)

    def take(self, idx) -> "CvaeBatch":
        return CvaeBatch(self.x[idx], self.y[idx], None if self.ids is None else self.ids[idx])


def _standardiser(a: np.ndarray):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    return mean, np.where(std > 1e-8, std, 1.0)


@dataclass
class CvaeModel:
    mode: str
    encoder: DenseNet
    decoder: DenseNet
    cond_width: int
    y_width: int
    latent_dim: int
    n_ids: int = 0
    decoder_sees_id: bool = False
    x_mean: np.ndarray = None
    x_std: np.ndarray = None
    y_mean: np.ndarray = None
    y_std: np.ndarray = None
    trained: bool = False
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.mode not in (MODEL_BASED, MODEL_FREE):
            raise StructuralError(f"unknown CVAE mode {self.mode!r}")
        if self.x_mean is None:
            self.x_mean, self.x_std = np.zeros(self.cond_width), np.ones(self.cond_width)
        if self.y_mean is None:
            self.y_mean, self.y_std = np.zeros(self.y_width), np.ones(self.y_width)
        want_enc = (self.y_width if self.mode == MODEL_BASED else self.n_ids) + self.cond_width
        want_dec = self.latent_dim + self.cond_width + (self.n_ids if self._dec_id else 0)
        if self.encoder.in_dim != want_enc or self.encoder.out_dim != 2 * self.latent_dim:
            raise StructuralError("encoder shape does not match the CVAE layout")
        if self.decoder.in_dim != want_dec or self.decoder.out_dim != self.y_width:
            raise StructuralError("decoder shape does not match the CVAE layout")

    @property
    def _dec_id(self) -> bool:
        return self.mode == MODEL_FREE and self.decoder_sees_id

    @classmethod
    def build(cls, mode, cond_width, y_width, cfg: CvaeConfig = CvaeConfig(), n_ids=0, rng=None) -> "CvaeModel":
        rng = np.random.default_rng(rng)
        if mode == MODEL_FREE and n_ids <= 0:
            raise StructuralError("model-free CVAE needs the number of agent ids")
        enc_in = (y_width if mode == MODEL_BASED else n_ids) + cond_width
        dec_id = mode == MODEL_FREE and cfg.decoder_sees_id
        dec_in = cfg.latent_dim + cond_width + (n_ids if dec_id else 0)
        enc = DenseNet.build([enc_in, *cfg.hidden, 2 * cfg.latent_dim], rng, out_gain=0.1)
        dec = DenseNet.build([dec_in, *cfg.hidden, y_width], rng)
        return cls(mode, enc, dec, cond_width, y_width, cfg.latent_dim, n_ids if mode == MODEL_FREE else 0, dec_id)

    # -- plumbing ------------------------------------------------------------
    def _onehot(self, ids) -> np.ndarray:
        ids = np.asarray(ids, dtype=int).ravel()
        if np.any((ids < 0) | (ids >= self.n_ids)):
            raise StructuralError("agent id out of range")
        out = np.zeros((ids.size, self.n_ids))
        out[np.arange(ids.size), ids] = 1.0
        return out

    def _nx(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if x.shape[1] != self.cond_width:
            raise StructuralError(f"condition width {x.shape[1]} != {self.cond_width}")
        return (x - self.x_mean) / self.x_std

    def _ny(self, y):
        y = np.atleast_2d(np.asarray(y, dtype=float))
        if y.shape[1] != self.y_width:
            raise StructuralError(f"target width {y.shape[1]} != {self.y_width}")
        return (y - self.y_mean) / self.y_std

    def _encoder_input(self, xn, y=None, ids=None):
        if self.mode == MODEL_BASED:
            if y is None:
                raise StructuralError("model-based encoding needs y")
            return np.concatenate([self._ny(y), xn], axis=1)
        if ids is None:
            raise StructuralError("model-free encoding needs agent ids")
        ids = np.broadcast_to(np.asarray(ids, dtype=int), (len(xn),)) if np.ndim(ids) == 0 else ids
        return np.concatenate([self._onehot(ids), xn], axis=1)

    def _decoder_input(self, z, xn, ids=None):
        parts = [z]
        if self._dec_id:
            parts.append(self._onehot(ids))
        parts.append(xn)
        return np.concatenate(parts, axis=1)

    # -- public --------------------------------------------------------------
    def encode(self, x, y=None, ids=None) -> GaussianHead:
        raw, _ = self.encoder.forward(self._encoder_input(self._nx(x), y, ids))
        return GaussianHead.from_raw(raw)

    def decode(self, z, x, ids=None) -> np.ndarray:
        """Decoder mean in the original (unnormalised) target units."""
        out, _ = self.decoder.forward(self._decoder_input(np.atleast_2d(z), self._nx(x), ids))
        return out * self.y_std + self.y_mean

    def loss_terms(self, batch: CvaeBatch, eps: np.ndarray):
        """Per-batch means of the reconstruction and prior-matching terms."""
        return _forward_backward(self, batch, eps, beta=1.0, need_grads=False)[1]

    def fit_normaliser(self, data: CvaeBatch, normalize: bool = True) -> None:
        if normalize:
            self.x_mean, self.x_std = _standardiser(data.x)
            self.y_mean, self.y_std = _standardiser(data.y)


def _forward_backward(model: CvaeModel, batch: CvaeBatch, eps, beta: float, need_grads: bool = True):
    B = len(batch)
    xn = model._nx(batch.x)
    yn = model._ny(batch.y)
    enc_in = model._encoder_input(xn, batch.y, batch.ids)
    raw, enc_cache = model.encoder.forward(enc_in)
    d = model.latent_dim
    mu, ls_raw = raw[:, :d], raw[:, d:]
    ls = np.clip(ls_raw, LOG_SIGMA_MIN, LOG_SIGMA_MAX)
    sigma = np.exp(ls)
    eps = np.asarray(eps, dtype=float).reshape(B, d)
    z = mu + sigma * eps
    yhat, dec_cache = model.decoder.forward(model._decoder_input(z, xn, batch.ids))
    resid = yhat - yn
    recon_rows = (resid**2).sum(axis=1) / model.y_width
    kl_rows = kl_to_standard_normal(GaussianHead(mu, ls))
    recon, kl = float(recon_rows.mean()), float(kl_rows.mean())
    loss = recon + beta * kl
    if not np.isfinite(loss):
        raise NumericError(f"CVAE loss is not finite (recon={recon}, kl={kl})")
    terms = {"recon": recon, "kl": kl}
    if not need_grads:
        return loss, terms, None
    g_yhat = 2.0 * resid / (B * model.y_width)
    g_dec, g_dec_in = model.decoder.backward(dec_cache, g_yhat)
    g_z = g_dec_in[:, :d]
    g_mu = g_z + beta * mu / B
    g_ls = g_z * sigma * eps + beta * (sigma**2 - 1.0) / B
    g_ls = g_ls * ((ls_raw > LOG_SIGMA_MIN) & (ls_raw < LOG_SIGMA_MAX))
    g_enc, _ = model.encoder.backward(enc_cache, np.concatenate([g_mu, g_ls], axis=1))
    return loss, terms, (g_enc, g_dec)


def _check_mode(model: CvaeModel, mode: str) -> None:
    if model.mode != mode:
        raise StructuralError(f"expected a {mode} CVAE, got {model.mode}")


def loss_model_based(model: CvaeModel, batch: CvaeBatch, eps, beta: float = 1.0):
    """Negative ELBO with y in the encoder; returns (loss, (enc_grads, dec_grads))."""
    _check_mode(model, MODEL_BASED)
    loss, _, grads = _forward_backward(model, batch, eps, beta)
    return loss, grads


def loss_model_free(model: CvaeModel, batch: CvaeBatch, eps, beta: float = 1.0):
    """Negative ELBO with the agent id in the encoder; returns (loss, (enc_grads, dec_grads))."""
    _check_mode(model, MODEL_FREE)
    if batch.ids is None:
        raise StructuralError("model-free batches carry agent ids")
    loss, _, grads = _forward_backward(model, batch, eps, beta)
    return loss, grads


def train_cvae(data: CvaeBatch, mode: str, cfg: CvaeConfig = CvaeConfig(), seed=0, n_ids: int = 0, log_every: int = 100):
    """Fixed-step minibatch training; deterministic for a given seed."""
    if len(data) < cfg.batch_size:
        raise CapacityError(f"need at least {cfg.batch_size} samples, got {len(data)}")
    if mode == MODEL_FREE and data.ids is None:
        raise StructuralError("model-free training data needs agent ids")
    rng = np.random.default_rng(seed)
    model = CvaeModel.build(mode, data.x.shape[1], data.y.shape[1], cfg, n_ids=n_ids, rng=rng)
    model.fit_normaliser(data, cfg.normalize)
    enc_opt, dec_opt = Adam(lr=cfg.lr), Adam(lr=cfg.lr)
    history = []
    for step in range(cfg.steps + 1):
        idx = rng.integers(0, len(data), cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, cfg.latent_dim))
        loss, terms, grads = _forward_backward(model, data.take(idx), eps, cfg.beta, need_grads=step < cfg.steps)
        if step % log_every == 0 or step == cfg.steps:
            history.append((step, loss, terms["recon"], terms["kl"]))
        if step < cfg.steps:
            enc_opt.step(model.encoder, grads[0])
            dec_opt.step(model.decoder, grads[1])
    model.trained = True
    model.history = history
    return model


def zeros_like_grads(model: CvaeModel):
    return GradBuffer.zeros_like(model.encoder), GradBuffer.zeros_like(model.decoder)
