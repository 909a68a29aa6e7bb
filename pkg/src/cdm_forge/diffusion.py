"""Noise schedules, forward noising, hybrid training loss and DDIM sampling.

Timesteps are 1-based throughout: ``t`` ranges over ``1..T`` and index ``0``
denotes clean data (``alpha_bar_0 = 1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, DomainError, MissingClassError, NonFiniteError
from .nets import Autoencoder, DenoiserTrainConfig
from .optim import Adam, warmup_lr
from .rng import SeededRNG
from .tensor import Tensor

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        object.__setattr__(self, "betas", b)
        alphas = 1.0 - b
        abar = np.cumprod(alphas)
        abar_prev = np.concatenate([[1.0], abar[:-1]])
        post_var = b * (1.0 - abar_prev) / (1.0 - abar)
        # post_var[0] is 0; clip its log to the t=2 value (or beta_1 if T=1)
        clip = post_var[1] if len(b) > 1 else b[0]
        post_logvar = np.log(np.concatenate([[clip], post_var[1:]]))
        for name, value in {
            "alphas": alphas,
            "alpha_bars": abar,
            "alpha_bars_prev": abar_prev,
            "posterior_variance": post_var,
            "posterior_log_variance": post_logvar,
            "posterior_mean_coef1": b * np.sqrt(abar_prev) / (1.0 - abar),
            "posterior_mean_coef2": (1.0 - abar_prev) * np.sqrt(alphas) / (1.0 - abar),
        }.items():
            object.__setattr__(self, name, value)

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    def check_t(self, t) -> np.ndarray:
        t = np.asarray(t)
        if np.any(t != np.round(t)) or np.any(t < 1) or np.any(t > self.num_steps):
            raise DomainError(f"timestep outside [1, {self.num_steps}]")
        return t.astype(np.int64)

    def alpha_bar(self, t) -> np.ndarray:
        """``alpha_bar_t`` with ``alpha_bar_0 = 1``; accepts 0 for convenience."""
        t = np.asarray(t, dtype=np.int64)
        return np.where(t == 0, 1.0, self.alpha_bars[np.maximum(t, 1) - 1])


def linear_beta_schedule(num_steps: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if num_steps < 1:
        raise ConfigError("schedule needs at least one step")
    if not 0.0 < beta_start <= beta_end < 1.0:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule(np.linspace(beta_start, beta_end, num_steps))


def _rows(coef: np.ndarray, like: np.ndarray) -> np.ndarray:
    coef = np.asarray(coef, dtype=np.float64)
    if coef.ndim == 0:
        return np.full(like.shape, float(coef))
    return np.broadcast_to(coef.reshape(-1, *([1] * (like.ndim - 1))), like.shape).copy()


def q_sample(schedule: NoiseSchedule, z0, t, eps) -> np.ndarray:
    """``sqrt(abar_t) z0 + sqrt(1 - abar_t) eps``; ``t`` is a scalar or one per row."""
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise DomainError(f"q_sample: noise shape {eps.shape} differs from data shape {z0.shape}")
    t = schedule.check_t(t)
    abar = schedule.alpha_bars[t - 1]
    return _rows(np.sqrt(abar), z0) * z0 + _rows(np.sqrt(1.0 - abar), z0) * eps


def q_step(schedule: NoiseSchedule, z_prev, t: int, eps) -> np.ndarray:
    """One forward transition ``z_t = sqrt(1 - beta_t) z_{t-1} + sqrt(beta_t) eps``."""
    beta = schedule.betas[int(schedule.check_t(t)) - 1]
    return math.sqrt(1.0 - beta) * np.asarray(z_prev) + math.sqrt(beta) * np.asarray(eps)


# ---------------------------------------------------------------------------
# losses


def gaussian_kl(mean1, logvar1, mean2, logvar2) -> Tensor:
    """Elementwise KL(N(mean1, e^logvar1) || N(mean2, e^logvar2))."""
    diff2 = T.square(T.sub(mean1, mean2))
    inner = T.add(
        T.sub(logvar2, logvar1),
        T.add(T.exp(T.sub(logvar1, logvar2)), T.mul(diff2, T.exp(T.neg(logvar2)))),
    )
    return T.scale(T.sub(inner, 1.0), 0.5)


def gaussian_nll(x, mean, logvar) -> Tensor:
    diff2 = T.square(T.sub(x, mean))
    return T.scale(T.add(T.add(logvar, LOG_2PI), T.mul(diff2, T.exp(T.neg(logvar)))), 0.5)


def _batch_mean_of_row_sums(x: Tensor) -> Tensor:
    return T.scale(T.tsum(x), 1.0 / x.shape[0])


def simple_term(eps, eps_hat: Tensor) -> Tensor:
    return _batch_mean_of_row_sums(T.square(T.sub(eps, eps_hat)))


def vlb_term(schedule: NoiseSchedule, z0: np.ndarray, z_t: np.ndarray, t: np.ndarray,
             eps_for_mean: np.ndarray, v: Tensor) -> Tensor:
    """Variational bound per row, averaged over the batch.

    ``eps_for_mean`` is a plain array: the model mean is built from it without
    a gradient path, so only the variance interpolation ``v`` is trained here.
    """
    t = schedule.check_t(t)
    if t.ndim == 0:
        t = np.full(z0.shape[0], int(t))
    i = t - 1
    abar = schedule.alpha_bars[i]
    x0_hat = (z_t - _rows(np.sqrt(1.0 - abar), z_t) * eps_for_mean) / _rows(np.sqrt(abar), z_t)
    c1 = _rows(schedule.posterior_mean_coef1[i], z_t)
    c2 = _rows(schedule.posterior_mean_coef2[i], z_t)
    mean_p = c1 * x0_hat + c2 * z_t
    mean_q = c1 * z0 + c2 * z_t
    log_beta = _rows(np.log(schedule.betas[i]), z_t)
    log_post = _rows(schedule.posterior_log_variance[i], z_t)
    logvar_p = T.add(T.mul(v, log_beta - log_post), log_post)

    kl = gaussian_kl(mean_q, log_post, mean_p, logvar_p)
    nll = gaussian_nll(z0, mean_p, logvar_p)
    first = _rows((t == 1).astype(np.float64), z_t)
    per_elem = T.add(T.mul(kl, 1.0 - first), T.mul(nll, first))
    return _batch_mean_of_row_sums(per_elem)


def _noised(schedule, z0, t, eps):
    z0 = np.asarray(z0, dtype=np.float64)
    t = schedule.check_t(t)
    if t.ndim == 0:
        t = np.full(z0.shape[0], int(t))
    return z0, t, q_sample(schedule, z0, t, eps)


def loss_simple(schedule: NoiseSchedule, denoiser, z0, t, f, eps, null_mask=None) -> Tensor:
    z0, t, z_t = _noised(schedule, z0, t, eps)
    eps_hat, _ = denoiser.forward(z_t, t, f, null_mask)
    return simple_term(np.asarray(eps, dtype=np.float64), eps_hat)


def loss_vlb(schedule: NoiseSchedule, denoiser, z0, t, f, eps, null_mask=None,
             frozen_eps_hat: np.ndarray | None = None) -> Tensor:
    """Bound term for the ``z_t`` built from ``(z0, t, eps)``.

    ``frozen_eps_hat`` pins the gradient-blocked mean to a given prediction;
    finite-difference checks use it so the reference function matches the
    stop-gradient semantics.
    """
    z0, t, z_t = _noised(schedule, z0, t, eps)
    eps_hat, v = denoiser.forward(z_t, t, f, null_mask)
    mean_eps = eps_hat.data.copy() if frozen_eps_hat is None else np.asarray(frozen_eps_hat)
    return vlb_term(schedule, z0, z_t, t, mean_eps, v)


def loss_total(schedule: NoiseSchedule, denoiser, z0, t, f, eps, null_mask=None, lam: float = 0.001,
               frozen_eps_hat: np.ndarray | None = None) -> Tensor:
    """``L_simple + lam * L_vlb`` from a single denoiser evaluation."""
    if lam < 0:
        raise ConfigError("vlb weight must be >= 0")
    z0, t, z_t = _noised(schedule, z0, t, eps)
    eps_hat, v = denoiser.forward(z_t, t, f, null_mask)
    simple = simple_term(np.asarray(eps, dtype=np.float64), eps_hat)
    if lam == 0:
        return simple
    mean_eps = eps_hat.data.copy() if frozen_eps_hat is None else np.asarray(frozen_eps_hat)
    return T.add(simple, T.scale(vlb_term(schedule, z0, z_t, t, mean_eps, v), lam))


# ---------------------------------------------------------------------------
# training


def train_ldm(x: np.ndarray, y: np.ndarray, bank: Mapping, autoencoder: Autoencoder, denoiser,
              schedule: NoiseSchedule, cfg: DenoiserTrainConfig, rng: SeededRNG) -> list[float]:
    """Train the conditional denoiser on seen data.

    Each item gets its own timestep, noise draw and condition
    ``f ~ N(mu_y, var_y)`` from its class statistics; with probability
    ``p_uncond`` the condition is replaced by the null token.  Returns the
    per-step loss history.
    """
    cfg.validate()
    missing = sorted({int(c) for c in np.unique(y)} - set(bank))
    if missing:
        raise MissingClassError(f"no class statistics for seen classes {missing}")
    classes = sorted(bank)
    row = {c: i for i, c in enumerate(classes)}
    means = np.stack([np.asarray(bank[c].mean) for c in classes])
    stds = np.sqrt(np.stack([np.asarray(bank[c].var) for c in classes]))
    label_rows = np.array([row[int(c)] for c in y])
    z_all = autoencoder.encode(x)

    opt = Adam(denoiser.params, lr=cfg.lr)
    batch_rng, t_rng, eps_rng, f_rng, drop_rng = (rng.spawn(n) for n in ("batch", "t", "eps", "f", "drop"))
    history = []
    step = 0
    for _ in range(cfg.epochs):
        perm = batch_rng.permutation(len(y))
        for start in range(0, len(y), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            n = len(idx)
            z0 = z_all[idx]
            t = t_rng.integers(1, schedule.num_steps + 1, size=n)
            eps = eps_rng.normal_array(z0.shape)
            r = label_rows[idx]
            f = means[r] + stds[r] * f_rng.normal_array((n, means.shape[1]))
            null_mask = drop_rng.uniform(n) < cfg.p_uncond
            lr = warmup_lr(step, cfg.lr, cfg.warmup_steps)
            opt.zero_grad()
            loss = loss_total(schedule, denoiser, z0, t, f, eps, null_mask, lam=cfg.vlb_weight)
            value = loss.item()
            if not math.isfinite(value):
                raise NonFiniteError(f"denoiser loss became non-finite at step {step}")
            T.backward(loss)
            opt.step(lr=lr)
            history.append(value)
            step += 1
    return history


# ---------------------------------------------------------------------------
# sampling


@dataclass
class SamplerConfig:
    steps: int = 25
    eta: float = 0.0
    guidance: float = 1.5
    seed: int = 0

    def validate(self, num_steps: int | None = None) -> None:
        if self.steps < 1 or (num_steps is not None and self.steps > num_steps):
            raise ConfigError(f"ddim steps must lie in [1, {num_steps}], got {self.steps}")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.guidance < 0:
            raise ConfigError("guidance scale must be >= 0")


def cfg_predict(denoiser, z_t, t, f, scale: float) -> np.ndarray:
    """Guided noise ``eps_null + scale * (eps_f - eps_null)``."""
    if scale < 0:
        raise ConfigError("guidance scale must be >= 0")
    z_t = np.asarray(z_t, dtype=np.float64)
    n = z_t.shape[0]
    t = np.broadcast_to(np.asarray(t), (n,))
    with T.no_grad():
        if scale == 1.0:
            return denoiser.forward(z_t, t, f)[0].data
        if scale == 0.0:
            return denoiser.forward(z_t, t, None)[0].data
        f = np.asarray(f, dtype=np.float64)
        both, _ = denoiser.forward(
            np.concatenate([z_t, z_t]), np.concatenate([t, t]), np.concatenate([f, f]),
            np.concatenate([np.zeros(n, bool), np.ones(n, bool)]),
        )
    eps_f, eps_null = both.data[:n], both.data[n:]
    return eps_null + scale * (eps_f - eps_null)


def ddim_timesteps(num_steps: int, steps: int) -> np.ndarray:
    """Decreasing visit order ``1 + k * (T // steps)`` for ``k = steps-1 .. 0``."""
    if steps < 1 or steps > num_steps:
        raise ConfigError(f"ddim steps must lie in [1, {num_steps}], got {steps}")
    stride = num_steps // steps
    return (1 + stride * np.arange(steps))[::-1]


def ddim_sample(denoiser, schedule: NoiseSchedule, f, cfg: SamplerConfig, z_T: np.ndarray | None = None,
                rng: SeededRNG | None = None) -> np.ndarray:
    """Run guided DDIM from ``z_T`` (drawn from ``N(0, I)`` if not given)."""
    cfg.validate(schedule.num_steps)
    f = np.asarray(f, dtype=np.float64)
    rng = rng or SeededRNG(cfg.seed)
    if z_T is None:
        z_T = rng.normal_array((f.shape[0], denoiser.d_z))
    z = np.array(z_T, dtype=np.float64)
    seq = ddim_timesteps(schedule.num_steps, cfg.steps)
    nexts = np.concatenate([seq[1:], [0]])
    for t, t_next in zip(seq, nexts):
        abar = float(schedule.alpha_bar(t))
        abar_next = float(schedule.alpha_bar(t_next))
        eps = cfg_predict(denoiser, z, np.full(len(z), t), f, cfg.guidance)
        x0 = (z - math.sqrt(1.0 - abar) * eps) / math.sqrt(abar)
        sigma = 0.0
        if cfg.eta > 0 and t_next > 0:
            sigma = cfg.eta * math.sqrt((1.0 - abar_next) / (1.0 - abar) * (1.0 - abar / abar_next))
        z = math.sqrt(abar_next) * x0 + math.sqrt(max(1.0 - abar_next - sigma ** 2, 0.0)) * eps
        if sigma > 0:
            z = z + sigma * rng.normal_array(z.shape)
    return z
