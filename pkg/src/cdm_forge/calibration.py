"""Class-conditional Gaussian modelling of the feature space.

Seen classes get diagonal Gaussians from their features.  An unseen class
starts from the mean of its support features plus the averaged variance of
its nearest seen classes, and is then refined by gradient descent on the
denoising loss of its supports through the frozen denoiser.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .diffusion import NoiseSchedule, SamplerConfig, ddim_sample, loss_simple
from .errors import (ConfigError, EmptySupportError, InsufficientSamplesError, MissingClassError,
                     NonFiniteError)
from .nets import Autoencoder
from .optim import Adam
from .rng import SeededRNG
from .tensor import Tensor


@dataclass
class ClassStats:
    class_id: int
    mean: np.ndarray
    var: np.ndarray
    count: int
    provenance: str = "seen"

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape:
            raise ValueError("mean and variance shapes differ")
        if np.any(self.var < 0) or not (np.all(np.isfinite(self.mean)) and np.all(np.isfinite(self.var))):
            raise ValueError(f"class {self.class_id}: statistics must be finite with var >= 0")


SeenBank = dict  # class id -> ClassStats


def compute_seen_stats(features_by_class: Mapping[int, np.ndarray], allow_singleton: bool = False) -> SeenBank:
    """Per-class mean and unbiased per-dimension variance.

    A class with a single sample has no variance estimate; with
    ``allow_singleton`` it receives the mean variance of the other classes,
    otherwise :class:`InsufficientSamplesError` is raised.
    """
    bank: SeenBank = {}
    singletons = []
    for c, feats in sorted(features_by_class.items()):
        feats = np.asarray(feats, dtype=np.float64)
        n = len(feats)
        if n < 2:
            if not allow_singleton or n == 0:
                raise InsufficientSamplesError(f"class {c} has {n} sample(s); need at least 2")
            singletons.append((int(c), feats))
            continue
        mu = feats.mean(axis=0)
        bank[int(c)] = ClassStats(int(c), mu, ((feats - mu) ** 2).sum(axis=0) / (n - 1), n)
    if singletons:
        if not bank:
            raise InsufficientSamplesError("every class is a singleton; no variance to borrow")
        fallback = np.mean([s.var for s in bank.values()], axis=0)
        for c, feats in singletons:
            bank[c] = ClassStats(c, feats[0], fallback.copy(), 1, provenance="borrowed-variance")
    return dict(sorted(bank.items()))


def support_mean(support_features) -> np.ndarray:
    feats = np.asarray(support_features, dtype=np.float64)
    if feats.ndim != 2 or len(feats) == 0:
        raise EmptySupportError("need at least one support feature")
    return feats.mean(axis=0)


def nearest_seen_classes(bank: SeenBank, query_mean, count: int = 2) -> list[int]:
    """The ``count`` seen classes whose means are closest (Euclidean); ties go to the lower id."""
    if not bank:
        raise MissingClassError("seen-class bank is empty")
    if count < 1 or count > len(bank):
        raise ConfigError(f"neighbour count {count} must lie in [1, {len(bank)}]")
    q = np.asarray(query_mean, dtype=np.float64)
    ranked = sorted(bank, key=lambda c: (float(np.sum((bank[c].mean - q) ** 2)), c))
    return ranked[:count]


def calibrate_variance(bank: SeenBank, neighbors: Sequence[int]) -> np.ndarray:
    if len(neighbors) == 0:
        raise ConfigError("neighbour set is empty")
    unknown = [c for c in neighbors if c not in bank]
    if unknown:
        raise MissingClassError(f"neighbour classes {unknown} are not in the seen bank")
    return np.mean([bank[c].var for c in neighbors], axis=0)


@dataclass
class UnseenDistribution:
    """Diagonal Gaussian of an unseen class, stored as mean and log-variance."""

    class_id: int
    mean: np.ndarray
    log_var: np.ndarray
    provenance: str = "calibrated"
    neighbors: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.log_var = np.asarray(self.log_var, dtype=np.float64)
        if not np.all(np.isfinite(np.exp(self.log_var))):
            raise ValueError("variance must be finite and positive")

    @property
    def var(self) -> np.ndarray:
        return np.exp(self.log_var)

    @classmethod
    def from_var(cls, class_id, mean, var, floor: float = 1e-12, **kw) -> "UnseenDistribution":
        return cls(class_id, mean, np.log(np.maximum(np.asarray(var, dtype=np.float64), floor)), **kw)

    def as_stats(self, count: int = 0) -> ClassStats:
        return ClassStats(self.class_id, self.mean.copy(), self.var, count, provenance=self.provenance)


def calibrate(bank: SeenBank, class_id: int, support_features, count: int = 2,
              per_support: bool = False) -> UnseenDistribution:
    """Support-mean plus neighbour-averaged variance.

    With ``per_support`` the neighbours are looked up for every support
    feature separately and the variance averages over all lookups.
    """
    feats = np.atleast_2d(np.asarray(support_features, dtype=np.float64))
    mu = support_mean(feats)
    if per_support:
        picks = [c for f in feats for c in nearest_seen_classes(bank, f, count)]
        var = calibrate_variance(bank, picks)
        neighbors = tuple(sorted(set(picks)))
    else:
        neighbors = tuple(nearest_seen_classes(bank, mu, count))
        var = calibrate_variance(bank, neighbors)
    return UnseenDistribution.from_var(class_id, mu, var, neighbors=neighbors)


def sample_conditional(mean, log_var, eps) -> Tensor:
    """``mean + exp(log_var / 2) * eps`` for a ``(n, d)`` block of noise.

    ``mean`` and ``log_var`` may be ``(d,)`` arrays or ``(1, d)`` tensors on a
    tape; in the latter case the draw is differentiable in both.
    """
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    rows = np.zeros(len(eps), dtype=np.int64)
    mean = mean if isinstance(mean, Tensor) else T.constant(np.asarray(mean, dtype=np.float64).reshape(1, -1))
    log_var = log_var if isinstance(log_var, Tensor) else T.constant(np.asarray(log_var, dtype=np.float64).reshape(1, -1))
    std = T.exp(T.scale(log_var, 0.5))
    return T.add(T.gather_rows(mean, rows), T.mul(T.gather_rows(std, rows), eps))


def draw_conditionals(dist: UnseenDistribution, n: int, rng: SeededRNG) -> np.ndarray:
    eps = rng.normal_array((n, dist.mean.shape[0]))
    return dist.mean + np.sqrt(dist.var) * eps


@dataclass
class InversionConfig:
    steps: int = 2000
    lr: float = 2e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def validate(self) -> None:
        if self.steps < 0:
            raise ConfigError("inversion steps must be >= 0")
        if self.lr <= 0:
            raise ConfigError("inversion lr must be > 0")


def invert_optimize(dist: UnseenDistribution, supports_x: np.ndarray, denoiser, schedule: NoiseSchedule,
                    autoencoder: Autoencoder, cfg: InversionConfig, rng: SeededRNG | None = None,
                    history: list | None = None) -> UnseenDistribution:
    """Refine ``(mean, log_var)`` of one unseen class against its support items.

    Each step visits the supports in order; for every support a fresh
    timestep, forward noise and reparameterisation noise are drawn and one
    Adam update is taken on the noise-prediction error.  The denoiser and
    autoencoder stay frozen.
    """
    cfg.validate()
    supports_x = np.atleast_2d(np.asarray(supports_x, dtype=np.float64))
    if len(supports_x) == 0:
        raise EmptySupportError("inversion needs at least one support item")
    rng = rng or SeededRNG(cfg.seed)
    t_rng, eps_rng, f_rng = rng.spawn("t"), rng.spawn("eps"), rng.spawn("f")
    z = autoencoder.encode(supports_x)
    mean = Tensor(dist.mean.reshape(1, -1), requires_grad=True, name="mean")
    log_var = Tensor(dist.log_var.reshape(1, -1), requires_grad=True, name="log_var")
    opt = Adam({"mean": mean, "log_var": log_var}, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2), eps=cfg.eps)

    frozen = {k: p.requires_grad for k, p in denoiser.params.items()}
    for p in denoiser.params.values():
        p.requires_grad = False
    try:
        for step in range(cfg.steps):
            for i in range(len(z)):
                z0 = z[i:i + 1]
                t = t_rng.integers(1, schedule.num_steps + 1, size=1)
                eps = eps_rng.normal_array(z0.shape)
                f = sample_conditional(mean, log_var, f_rng.normal_array((1, mean.shape[1])))
                opt.zero_grad()
                loss = loss_simple(schedule, denoiser, z0, t, f, eps)
                value = loss.item()
                if not math.isfinite(value):
                    raise NonFiniteError(f"inversion loss became non-finite at step {step}")
                T.backward(loss)
                opt.step()
                if history is not None:
                    history.append(value)
    finally:
        for k, p in denoiser.params.items():
            p.requires_grad = frozen[k]
    return replace(dist, mean=mean.data[0].copy(), log_var=log_var.data[0].copy(), provenance="inverted")


def support_denoising_loss(dist: UnseenDistribution, supports_x: np.ndarray, denoiser, schedule: NoiseSchedule,
                           autoencoder: Autoencoder, n_draws: int, rng: SeededRNG) -> float:
    """Monte-Carlo estimate of the mean noise-prediction error over supports."""
    z = autoencoder.encode(np.atleast_2d(supports_x))
    zz = np.repeat(z, n_draws, axis=0)
    t = rng.integers(1, schedule.num_steps + 1, size=len(zz))
    eps = rng.normal_array(zz.shape)
    f = dist.mean + np.sqrt(dist.var) * rng.normal_array((len(zz), dist.mean.shape[0]))
    with T.no_grad():
        return loss_simple(schedule, denoiser, zz, t, f, eps).item()


def generate_unseen(dist: UnseenDistribution, count: int, denoiser, schedule: NoiseSchedule,
                    autoencoder: Autoencoder, sampler: SamplerConfig, rng: SeededRNG | None = None) -> np.ndarray:
    """Draw ``count`` conditions from ``dist``, run DDIM, decode to data space."""
    if count < 1:
        raise ConfigError("count must be >= 1")
    rng = rng or SeededRNG(sampler.seed)
    f = draw_conditionals(dist, count, rng.spawn("f"))
    z0 = ddim_sample(denoiser, schedule, f, sampler, rng=rng.spawn("z"))
    return autoencoder.decode(z0)
