"""Sample-quality metrics: target-class accuracy and Frechet distances.

Generated batches are scored three ways: argmax accuracy under the exact
Bayes reference (the unbiased judge), argmax accuracy under the guiding
classifier itself (the self-reported number), and Frechet distances between
Gaussians fitted to the samples and to fresh reference draws, pooled over
classes (fd) or restricted to the target class (cfd). Features are the raw
data coordinates; at this scale the data space is already the semantic space.
"""

import csv
import json
from dataclasses import dataclass, replace

import numpy as np

from . import classifier as clf
from .guidance import GuidanceConfig, sample_batch
from .rng import substream
from .synthdata import GmmSpec, sample_class_points

_COV_REG = 1e-10


class EmptyBatchError(ValueError):
    """Every chain in the batch diverged; there is nothing to score."""


def _sym_sqrt(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((M + M.T) / 2.0)
    vals = np.maximum(vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def gaussian_frechet(mu_a, cov_a, mu_b, cov_b) -> float:
    """Squared 2-Wasserstein distance between two Gaussians.

    The cross term uses the symmetric square root (A^{1/2} B A^{1/2})^{1/2}
    via eigendecomposition, which is well-defined for any symmetric PSD pair.
    """
    mu_a = np.asarray(mu_a, dtype=np.float64)
    mu_b = np.asarray(mu_b, dtype=np.float64)
    cov_a = np.asarray(cov_a, dtype=np.float64)
    cov_b = np.asarray(cov_b, dtype=np.float64)
    root_a = _sym_sqrt(cov_a)
    cross = _sym_sqrt(root_a @ cov_b @ root_a)
    d2 = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a + cov_b - 2.0 * cross))
    return max(d2, 0.0)


def fit_gaussian(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sample mean and regularized sample covariance of a point set."""
    X = np.asarray(points, dtype=np.float64)
    n, d = X.shape
    if n < d + 1:
        raise ValueError(f"need at least {d + 1} points to fit, got {n}")
    mu = X.mean(axis=0)
    cov = np.cov(X, rowvar=False).reshape(d, d) + _COV_REG * np.eye(d)
    return mu, cov


def frechet_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Frechet distance between Gaussians fitted to two point sets."""
    return gaussian_frechet(*fit_gaussian(points_a), *fit_gaussian(points_b))


@dataclass
class MetricsReport:
    target_accuracy_oracle: float
    target_accuracy_guiding: float
    fd: float
    cfd: float
    n_samples: int
    n_diverged: int
    config_hash: str = ""

    def to_dict(self) -> dict:
        return {
            "target_accuracy_oracle": self.target_accuracy_oracle,
            "target_accuracy_guiding": self.target_accuracy_guiding,
            "fd": self.fd,
            "cfd": self.cfd,
            "n_samples": self.n_samples,
            "n_diverged": self.n_diverged,
            "config_hash": self.config_hash,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def evaluate(
    samples: np.ndarray,
    spec: GmmSpec,
    target_class: int,
    guiding: clf.ClassifierHandle,
    reference_n: int | None = None,
    seed: int = 0,
    n_diverged: int = 0,
    config_hash: str = "",
) -> MetricsReport:
    """Score a batch of generated samples against fresh reference draws.

    Reference sets are drawn i.i.d. from the known mixture (pooled for fd,
    target class only for cfd), sized like the sample set unless reference_n
    overrides. Deterministic in (samples, seed).
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or len(X) == 0:
        raise EmptyBatchError("no surviving samples to evaluate")
    ref_n = int(reference_n) if reference_n is not None else len(X)
    rng = substream(seed, "evaluate-reference")
    pooled_ref = _sample_pooled(spec, ref_n, rng)
    class_ref = sample_class_points(spec, target_class, ref_n, rng)

    oracle = clf.bayes_oracle(spec)
    pred_oracle = np.argmax(clf.predict_logits(oracle, X), axis=1)
    pred_guiding = np.argmax(clf.predict_logits(guiding, X), axis=1)
    return MetricsReport(
        target_accuracy_oracle=float(np.mean(pred_oracle == target_class)),
        target_accuracy_guiding=float(np.mean(pred_guiding == target_class)),
        fd=frechet_distance(X, pooled_ref),
        cfd=frechet_distance(X, class_ref),
        n_samples=len(X),
        n_diverged=int(n_diverged),
        config_hash=config_hash,
    )


def _sample_pooled(spec: GmmSpec, n: int, rng) -> np.ndarray:
    labels = rng.choice(spec.n_classes, size=n, p=spec.priors())
    out = np.empty((n, spec.dim))
    for y in range(spec.n_classes):
        mask = labels == y
        if np.any(mask):
            out[mask] = sample_class_points(spec, y, int(mask.sum()), rng)
    return out


def sweep(
    dn,
    schedule,
    base_cfg: GuidanceConfig,
    scales,
    n_per_scale: int,
    seed: int,
    reference_n: int | None = None,
    config_hash: str = "",
) -> list[tuple[float, MetricsReport]]:
    """One sampled batch and report per guidance scale.

    Every scale reuses the same sampling seed and the same evaluation seed,
    so the scale is the only varying factor. A scale whose batch diverges
    entirely still yields a row, with NaN metrics and a full diverged count.
    """
    if len(list(scales)) == 0:
        raise ValueError("scales must be nonempty")
    rows = []
    for s in scales:
        cfg = replace(base_cfg, scale=float(s))
        batch = sample_batch(dn, schedule, cfg, n_per_scale, seed)
        kept = batch.kept()
        if len(kept) == 0:
            report = MetricsReport(
                float("nan"), float("nan"), float("nan"), float("nan"),
                0, batch.n_diverged, config_hash,
            )
        else:
            report = evaluate(
                kept,
                dn.spec,
                cfg.target_class,
                cfg.classifier,
                reference_n=reference_n,
                seed=seed,
                n_diverged=batch.n_diverged,
                config_hash=config_hash,
            )
        rows.append((float(s), report))
    return rows


def save_sweep_csv(rows, path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as f:
        if config_hash:
            f.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(["s", "acc_oracle", "acc_guiding", "fd", "cfd", "n", "n_diverged"])
        for s, report in rows:
            writer.writerow(
                [
                    format(s, ".17g"),
                    format(report.target_accuracy_oracle, ".17g"),
                    format(report.target_accuracy_guiding, ".17g"),
                    format(report.fd, ".17g"),
                    format(report.cfd, ".17g"),
                    report.n_samples,
                    report.n_diverged,
                ]
            )
