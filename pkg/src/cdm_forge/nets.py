"""Desk-scale networks: feature extractor, latent autoencoder and denoiser.

All three hold their weights in a ``params`` dict of named tensors, which is
what the optimizers update and what checkpoints store.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, ModeError, NonFiniteError, ShapeError
from .optim import Adam, warmup_lr
from .rng import SeededRNG
from .tensor import Tensor


def _init_weight(rng: SeededRNG, fan_in: int, fan_out: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal_array((fan_in, fan_out)) * gain / math.sqrt(fan_in), requires_grad=True)


def _zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def _as_batch(x, dim: int, what: str) -> tuple[np.ndarray, bool]:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    arr = arr[None, :] if single else arr
    if arr.ndim != 2 or arr.shape[1] != dim:
        raise ShapeError(f"{what}: expected trailing dimension {dim}, got shape {np.shape(x)}")
    return arr, single


@dataclass
class ExtractorTrainConfig:
    epochs: int = 5
    batch_size: int = 64
    lr: float = 3e-3
    warmup_steps: int = 1
    p_uncond: float = 0.0

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("extractor training needs epochs >= 0, batch_size >= 1, lr > 0")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError("p_uncond must lie in [0, 1)")


@dataclass
class DenoiserTrainConfig:
    epochs: int = 150
    batch_size: int = 64
    lr: float = 1e-3
    warmup_steps: int = 500
    p_uncond: float = 0.1
    vlb_weight: float = 0.001

    def validate(self) -> None:
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("denoiser training needs epochs >= 0, batch_size >= 1, lr > 0")
        if self.warmup_steps < 1:
            raise ConfigError("warmup_steps must be >= 1")
        if not 0.0 <= self.p_uncond < 1.0:
            raise ConfigError("p_uncond must lie in [0, 1)")
        if self.vlb_weight < 0:
            raise ConfigError("vlb_weight must be >= 0")


@dataclass
class AutoencoderTrainConfig:
    epochs: int = 200
    batch_size: int = 128
    lr: float = 1e-2


# ---------------------------------------------------------------------------
# feature extractor


class FeatureExtractor:
    """Three-layer MLP classifier; the second layer's activation is the feature."""

    def __init__(self, d_x: int, d_f: int, classes, hidden: int = 64, rng: SeededRNG | None = None):
        rng = rng or SeededRNG(0)
        self.d_x, self.d_f, self.hidden = d_x, d_f, hidden
        self.classes = [int(c) for c in classes]
        # zero head: an untrained model predicts the uniform distribution
        self.params = {
            "w1": _init_weight(rng, d_x, hidden, gain=math.sqrt(2.0)),
            "b1": _zeros(hidden),
            "w2": _init_weight(rng, hidden, d_f, gain=math.sqrt(2.0)),
            "b2": _zeros(d_f),
            "w3": _zeros(d_f, len(self.classes)),
            "b3": _zeros(len(self.classes)),
        }

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def _features(self, x) -> Tensor:
        p = self.params
        h = T.silu(T.affine(x, p["w1"], p["b1"]))
        return T.silu(T.affine(h, p["w2"], p["b2"]))

    def logits(self, x) -> Tensor:
        return T.affine(self._features(x), self.params["w3"], self.params["b3"])

    def cross_entropy(self, x, labels) -> Tensor:
        index = {c: i for i, c in enumerate(self.classes)}
        targets = np.array([index[int(c)] for c in labels])
        onehot = np.zeros((len(targets), self.n_classes))
        onehot[np.arange(len(targets)), targets] = 1.0
        logp = T.log_softmax(self.logits(x))
        return T.scale(T.tsum(T.mul(logp, onehot)), -1.0 / len(targets))

    def predict(self, x) -> np.ndarray:
        arr, _ = _as_batch(x, self.d_x, "predict")
        with T.no_grad():
            return np.asarray(self.classes)[self.logits(arr).data.argmax(axis=1)]


def extract_feature(extractor: FeatureExtractor, x) -> np.ndarray:
    """Penultimate activation for one vector ``(d_x,)`` or a batch ``(n, d_x)``."""
    arr, single = _as_batch(x, extractor.d_x, "extract_feature")
    with T.no_grad():
        f = extractor._features(arr).data
    return f[0] if single else f


def train_extractor(x: np.ndarray, y: np.ndarray, cfg: ExtractorTrainConfig, rng: SeededRNG,
                    d_f: int = 8, hidden: int = 64) -> tuple[FeatureExtractor, list[float]]:
    cfg.validate()
    classes = sorted(int(c) for c in np.unique(y))
    if len(classes) < 2:
        raise ConfigError("feature extractor needs at least two classes")
    model = FeatureExtractor(x.shape[1], d_f, classes, hidden=hidden, rng=rng.spawn("init"))
    opt = Adam(model.params, lr=cfg.lr)
    order_rng = rng.spawn("batches")
    history = []
    step = 0
    for _ in range(cfg.epochs):
        perm = order_rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            opt.zero_grad()
            loss = model.cross_entropy(x[idx], y[idx])
            T.backward(loss)
            opt.step(lr=warmup_lr(step + 1, cfg.lr, cfg.warmup_steps))
            step += 1
            history.append(loss.item())
            if not math.isfinite(history[-1]):
                raise NonFiniteError(f"extractor loss became non-finite at step {step}")
    return model, history


# ---------------------------------------------------------------------------
# autoencoder


class Autoencoder:
    """Latent map ``E``/``D``: exact identity, or a trainable linear pair."""

    MODES = ("identity", "linear")

    def __init__(self, d_x: int, d_z: int | None = None, mode: str = "identity", rng: SeededRNG | None = None):
        if mode not in self.MODES:
            raise ConfigError(f"unknown autoencoder mode {mode!r}")
        d_z = d_x if d_z is None else d_z
        if mode == "identity" and d_z != d_x:
            raise ConfigError("identity autoencoder requires d_z == d_x")
        self.d_x, self.d_z, self.mode = d_x, d_z, mode
        self.params: dict[str, Tensor] = {}
        if mode == "linear":
            rng = rng or SeededRNG(0)
            self.params = {
                "enc_w": _init_weight(rng, d_x, d_z),
                "enc_b": _zeros(d_z),
                "dec_w": _init_weight(rng, d_z, d_x),
                "dec_b": _zeros(d_x),
            }

    def _encode(self, x) -> Tensor:
        if self.mode == "identity":
            return T.constant(x)
        return T.affine(x, self.params["enc_w"], self.params["enc_b"])

    def _decode(self, z) -> Tensor:
        if self.mode == "identity":
            return T.constant(z)
        return T.affine(z, self.params["dec_w"], self.params["dec_b"])

    def encode(self, x) -> np.ndarray:
        arr, single = _as_batch(x, self.d_x, "encode")
        with T.no_grad():
            z = self._encode(arr).data.copy()
        return z[0] if single else z

    def decode(self, z) -> np.ndarray:
        arr, single = _as_batch(z, self.d_z, "decode")
        with T.no_grad():
            x = self._decode(arr).data.copy()
        return x[0] if single else x

    def reconstruction_mse(self, x: np.ndarray) -> float:
        return float(np.mean((self.decode(self.encode(x)) - x) ** 2))


def train_autoencoder(ae: Autoencoder, x: np.ndarray, cfg: AutoencoderTrainConfig, rng: SeededRNG) -> list[float]:
    """Fit the linear autoencoder by Adam on reconstruction MSE.

    After the gradient phase the decoder is refit by least squares given the
    learned encoder, which is the exact optimum of the (convex) decoder
    sub-problem.
    """
    if ae.mode != "linear":
        raise ModeError(f"cannot train an autoencoder in {ae.mode!r} mode")
    opt = Adam(ae.params, lr=cfg.lr)
    order_rng = rng.spawn("batches")
    history = []
    for epoch in range(cfg.epochs):
        perm = order_rng.permutation(len(x))
        for start in range(0, len(x), cfg.batch_size):
            batch = x[perm[start:start + cfg.batch_size]]
            opt.zero_grad()
            loss = T.mean(T.square(T.sub(ae._decode(ae._encode(batch)), batch)))
            T.backward(loss)
            opt.step()
            history.append(loss.item())
            if not math.isfinite(history[-1]):
                raise NonFiniteError(f"autoencoder loss became non-finite in epoch {epoch}")
    z = ae.encode(x)
    design = np.concatenate([z, np.ones((len(z), 1))], axis=1)
    sol, *_ = np.linalg.lstsq(design, x, rcond=None)
    ae.params["dec_w"].data[...] = sol[:-1]
    ae.params["dec_b"].data[...] = sol[-1]
    return history


# ---------------------------------------------------------------------------
# denoiser


def timestep_embedding(t, dim: int = 32, max_period: float = 10000.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class Denoiser:
    """MLP noise predictor ``(z_t, t, f) -> (eps_hat, v)``.

    The condition ``f`` is projected to ``d_c`` dims; rows flagged as null use
    the learned embedding ``u_null`` instead.  Inputs are concatenated with a
    sinusoidal time embedding before the hidden layers.
    """

    def __init__(self, d_z: int, d_f: int, num_steps: int, d_c: int = 16, d_t: int = 32,
                 hidden: int = 128, rng: SeededRNG | None = None):
        rng = rng or SeededRNG(0)
        self.d_z, self.d_f, self.d_c, self.d_t, self.hidden = d_z, d_f, d_c, d_t, hidden
        self.num_steps = num_steps
        d_in = d_z + d_t + d_c
        self.params = {
            "cond_w": _init_weight(rng, d_f, d_c),
            "cond_b": _zeros(d_c),
            "u_null": Tensor(rng.normal_array((1, d_c)) * 0.1, requires_grad=True),
            "w1": _init_weight(rng, d_in, hidden, gain=math.sqrt(2.0)),
            "b1": _zeros(hidden),
            "w2": _init_weight(rng, hidden, hidden, gain=math.sqrt(2.0)),
            "b2": _zeros(hidden),
            "w3": _init_weight(rng, hidden, hidden, gain=math.sqrt(2.0)),
            "b3": _zeros(hidden),
            "w_out": _zeros(hidden, 2 * d_z),
            "b_out": _zeros(2 * d_z),
        }

    def check_t(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t))
        if not np.issubdtype(t.dtype, np.integer):
            if not np.all(t == np.round(t)):
                raise DomainError("timesteps must be integers")
            t = t.astype(np.int64)
        if t.size and (t.min() < 1 or t.max() > self.num_steps):
            raise DomainError(f"timestep out of range [1, {self.num_steps}]: {t.min()}..{t.max()}")
        return t

    def condition(self, f, batch: int, null_mask=None) -> Tensor:
        null_rows = T.gather_rows(self.params["u_null"], np.zeros(batch, dtype=np.int64))
        if f is None:
            return null_rows
        f = T.constant(f)
        if f.shape != (batch, self.d_f):
            raise ShapeError(f"denoiser condition: expected shape {(batch, self.d_f)}, got {f.shape}")
        cond = T.affine(f, self.params["cond_w"], self.params["cond_b"])
        if null_mask is None:
            return cond
        null_mask = np.asarray(null_mask, dtype=bool)
        if not null_mask.any():
            return cond
        keep = np.repeat((~null_mask)[:, None].astype(np.float64), self.d_c, axis=1)
        return T.add(T.mul(cond, keep), T.mul(null_rows, 1.0 - keep))

    def forward(self, z_t, t, f, null_mask=None) -> tuple[Tensor, Tensor]:
        """Return ``(eps_hat, v)``; ``f=None`` selects the null condition for every row."""
        z_t = T.constant(z_t)
        if z_t.ndim != 2 or z_t.shape[1] != self.d_z:
            raise ShapeError(f"denoiser: expected z_t of shape (n, {self.d_z}), got {z_t.shape}")
        batch = z_t.shape[0]
        t = self.check_t(t)
        if t.size == 1 and batch != 1:
            t = np.full(batch, int(t[0]))
        temb = timestep_embedding(t, self.d_t)
        p = self.params
        h = T.concat([z_t, temb, self.condition(f, batch, null_mask)], axis=1)
        h = T.silu(T.affine(h, p["w1"], p["b1"]))
        h = T.silu(T.affine(h, p["w2"], p["b2"]))
        h = T.silu(T.affine(h, p["w3"], p["b3"]))
        out = T.affine(h, p["w_out"], p["b_out"])
        return out[:, : self.d_z], out[:, self.d_z:]

    def __call__(self, z_t, t, f, null_mask=None):
        return self.forward(z_t, t, f, null_mask)

    def freeze(self) -> None:
        for prm in self.params.values():
            prm.requires_grad = False
            prm.grad = None

    def unfreeze(self) -> None:
        for prm in self.params.values():
            prm.requires_grad = True


def denoise(denoiser: Denoiser, z_t, t, f_or_null) -> tuple[np.ndarray, np.ndarray]:
    """Inference helper: ``f_or_null=None`` uses the null token."""
    z, single = _as_batch(z_t, denoiser.d_z, "denoise")
    f = None
    if f_or_null is not None:
        f, _ = _as_batch(f_or_null, denoiser.d_f, "denoise")
        if f.shape[0] == 1 and z.shape[0] > 1:
            f = np.repeat(f, z.shape[0], axis=0)
    with T.no_grad():
        eps, v = denoiser.forward(z, t, f)
    eps, v = eps.data, v.data
    return (eps[0], v[0]) if single else (eps, v)
