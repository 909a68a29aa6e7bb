"""Fidelity and diversity scores in a fixed feature space, plus the
few-shot classification harness."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import InsufficientSamplesError, ShapeError
from .optim import Adam
from .rng import SeededRNG
from .tensor import Tensor

EIG_CLAMP = -1e-10


@dataclass
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray  # (d,) diagonal variances or (d, d) full covariance
    count: int

    @property
    def full(self) -> bool:
        return self.cov.ndim == 2

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def fit_gaussian(features, full: bool = False) -> GaussianFit:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise InsufficientSamplesError(f"need at least 2 feature vectors, got {len(x)}")
    mu = x.mean(axis=0)
    centered = x - mu
    if full:
        cov = centered.T @ centered / (len(x) - 1)
        cov = 0.5 * (cov + cov.T)
    else:
        cov = (centered ** 2).sum(axis=0) / (len(x) - 1)
    return GaussianFit(mu, cov, len(x))


def _psd_sqrt(m: np.ndarray) -> np.ndarray:
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    w = np.where(w < 0, 0.0, w)
    return (v * np.sqrt(w)) @ v.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """Squared 2-Wasserstein distance between two Gaussian fits."""
    if a.dim != b.dim or a.full != b.full:
        raise ShapeError(f"frechet_distance: incompatible fits (dim {a.dim}/{b.dim}, full {a.full}/{b.full})")
    mean_term = float(np.sum((a.mean - b.mean) ** 2))
    if not a.full:
        return mean_term + float(np.sum((np.sqrt(a.cov) - np.sqrt(b.cov)) ** 2))
    # tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), the inner matrix is symmetric PSD
    ra = _psd_sqrt(a.cov)
    inner = np.linalg.eigvalsh(0.5 * (ra @ b.cov @ ra + (ra @ b.cov @ ra).T))
    cross = float(np.sum(np.sqrt(np.clip(inner, 0.0, None))))
    return mean_term + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * cross


def mean_pairwise_distance(features) -> float:
    x = np.asarray(features, dtype=np.float64)
    if len(x) < 2:
        raise InsufficientSamplesError("need at least 2 items to measure pairwise distance")
    sq = np.sum(x * x, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * x @ x.T, 0.0)
    iu = np.triu_indices(len(x), k=1)
    return float(np.mean(np.sqrt(d2[iu])))


def diversity_score(features_by_class: Mapping[int, np.ndarray]) -> float:
    """Mean over classes of the mean within-class pairwise Euclidean distance."""
    if not features_by_class:
        raise InsufficientSamplesError("no classes given")
    return float(np.mean([mean_pairwise_distance(f) for f in features_by_class.values()]))


# ---------------------------------------------------------------------------
# reports

REPORT_COLUMNS = ("row", "frechet", "diversity", "n_real", "n_fake")
REPORT_FORMAT_VERSION = 1


@dataclass
class MetricReport:
    per_class: dict[int, dict[str, float]]
    seed: int = 0
    config: dict[str, str] = field(default_factory=dict)
    accuracy: float | None = None
    baseline_accuracy: float | None = None

    @property
    def frechet(self) -> float:
        return float(np.mean([r["frechet"] for r in self.per_class.values()]))

    @property
    def diversity(self) -> float:
        return float(np.mean([r["diversity"] for r in self.per_class.values()]))

    def to_csv(self) -> str:
        out = io.StringIO()
        out.write(f"# format_version={REPORT_FORMAT_VERSION}\n")
        w = csv.writer(out, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for c in sorted(self.per_class):
            r = self.per_class[c]
            w.writerow([f"class_{c}", f"{r['frechet']:.12g}", f"{r['diversity']:.12g}", r["n_real"], r["n_fake"]])
        w.writerow(["aggregate", f"{self.frechet:.12g}", f"{self.diversity:.12g}",
                    sum(int(r["n_real"]) for r in self.per_class.values()),
                    sum(int(r["n_fake"]) for r in self.per_class.values())])
        return out.getvalue()

    def summary(self) -> str:
        lines = [f"report format {REPORT_FORMAT_VERSION}, seed {self.seed}"]
        for c in sorted(self.per_class):
            r = self.per_class[c]
            lines.append(f"  class {c:>3}: frechet {r['frechet']:.6f}  diversity {r['diversity']:.6f}")
        lines.append(f"  aggregate: frechet {self.frechet:.6f}  diversity {self.diversity:.6f}")
        if self.accuracy is not None:
            lines.append(f"  few-shot accuracy {self.accuracy:.4f} (real-only baseline {self.baseline_accuracy:.4f})")
        for k in sorted(self.config):
            lines.append(f"  config {k} = {self.config[k]}")
        return "\n".join(lines) + "\n"


def build_report(real_by_class: Mapping[int, np.ndarray], fake_by_class: Mapping[int, np.ndarray],
                 seed: int = 0, full: bool = False, config: dict | None = None) -> MetricReport:
    """Score generated features against held-out real features, class by class."""
    per_class = {}
    for c in sorted(real_by_class):
        real, fake = real_by_class[c], fake_by_class[c]
        per_class[int(c)] = {
            "frechet": frechet_distance(fit_gaussian(real, full), fit_gaussian(fake, full)),
            "diversity": mean_pairwise_distance(fake),
            "n_real": len(real),
            "n_fake": len(fake),
        }
    return MetricReport(per_class, seed=seed, config=dict(config or {}))


# ---------------------------------------------------------------------------
# few-shot classification


def train_linear_head(features: np.ndarray, labels: np.ndarray, n_classes: int, rng: SeededRNG,
                      epochs: int = 200, lr: float = 0.05, weight_decay: float = 1e-3):
    """Softmax regression on fixed features (full batch Adam); returns (W, b, mu, sd)."""
    mu = features.mean(axis=0)
    sd = features.std(axis=0) + 1e-8
    x = (features - mu) / sd
    w = Tensor(rng.normal_array((x.shape[1], n_classes)) * 0.01, requires_grad=True)
    b = Tensor(np.zeros(n_classes), requires_grad=True)
    onehot = np.eye(n_classes)[labels]
    opt = Adam({"w": w, "b": b}, lr=lr)
    for _ in range(epochs):
        opt.zero_grad()
        logp = T.log_softmax(T.affine(x, w, b))
        nll = T.scale(T.tsum(T.mul(logp, onehot)), -1.0 / len(labels))
        loss = T.add(nll, T.scale(T.tsum(T.square(w)), weight_decay))
        T.backward(loss)
        opt.step()
    return w.data.copy(), b.data.copy(), mu, sd


def head_accuracy(head, features: np.ndarray, labels: np.ndarray) -> float:
    w, b, mu, sd = head
    pred = (((features - mu) / sd) @ w + b).argmax(axis=1)
    return float(np.mean(pred == labels))


@dataclass
class FewShotResult:
    accuracy: float
    baseline_accuracy: float
    episode_accuracies: list[float]
    episode_baselines: list[float]


def few_shot_classification(x: np.ndarray, y: np.ndarray, unseen: Sequence[int],
                            featurize: Callable[[np.ndarray], np.ndarray],
                            generate: Callable[[int, np.ndarray, SeededRNG], np.ndarray],
                            n_way: int, n_shot: int, episodes: int, rng: SeededRNG,
                            head_epochs: int = 200) -> FewShotResult:
    """N-way C-shot accuracy with and without generated training items.

    Per episode: pick ``n_way`` unseen classes, ``n_shot`` supports each,
    call ``generate(class_id, support_x, rng)`` for synthetic items, fit a
    linear head on frozen features of supports (+ fakes) and score it on all
    remaining items of those classes.
    """
    unseen = sorted(unseen)
    n_way = min(n_way, len(unseen))
    accs, bases = [], []
    for e in range(episodes):
        erng = rng.spawn(f"episode{e}")
        chosen = [unseen[i] for i in sorted(erng.permutation(len(unseen))[:n_way])]
        sx, sy, fx, fy, qx, qy = [], [], [], [], [], []
        for label, c in enumerate(chosen):
            rows = np.flatnonzero(y == c)
            perm = erng.permutation(len(rows))
            sup, qry = rows[perm[:n_shot]], rows[perm[n_shot:]]
            sx.append(x[sup]); sy += [label] * len(sup)
            qx.append(x[qry]); qy += [label] * len(qry)
            fake = generate(c, x[sup], erng.spawn(f"gen{c}"))
            fx.append(fake); fy += [label] * len(fake)
        sf, ff, qf = featurize(np.concatenate(sx)), featurize(np.concatenate(fx)), featurize(np.concatenate(qx))
        sy, fy, qy = np.array(sy), np.array(fy), np.array(qy)
        base = train_linear_head(sf, sy, n_way, erng.spawn("head-real"), epochs=head_epochs)
        aug = train_linear_head(np.concatenate([sf, ff]), np.concatenate([sy, fy]), n_way,
                                erng.spawn("head-aug"), epochs=head_epochs)
        bases.append(head_accuracy(base, qf, qy))
        accs.append(head_accuracy(aug, qf, qy))
    return FewShotResult(float(np.mean(accs)), float(np.mean(bases)), accs, bases)
