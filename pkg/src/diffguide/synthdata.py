"""Labeled Gaussian-mixture data with exactly known densities.

Every class is a mixture of Gaussian components; the full generative law is
known, so downstream modules can build an exact denoiser and a Bayes-optimal
reference classifier instead of estimating either.
"""

import csv
from dataclasses import dataclass

import numpy as np

_PROB_TOL = 1e-12


@dataclass(frozen=True)
class Component:
    weight: float
    mean: np.ndarray
    cov: np.ndarray


@dataclass(frozen=True)
class ClassSpec:
    prior: float
    components: tuple[Component, ...]


@dataclass(frozen=True)
class GmmSpec:
    classes: tuple[ClassSpec, ...]

    @property
    def dim(self) -> int:
        return len(self.classes[0].components[0].mean)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def priors(self) -> np.ndarray:
        return np.array([c.prior for c in self.classes])


@dataclass(frozen=True)
class LabeledDataset:
    points: np.ndarray
    labels: np.ndarray
    seed: int

    def __len__(self) -> int:
        return len(self.points)


def make_spec(classes: list[tuple[float, list[tuple[float, list, np.ndarray]]]]) -> GmmSpec:
    """Validate and freeze a mixture spec.

    classes: list of (prior, components) where each component is
    (weight, mean, cov); cov may be a scalar (spherical), a diagonal vector,
    or a full symmetric positive-definite matrix.
    """
    built = []
    dim = None
    for prior, comps in classes:
        frozen_comps = []
        for weight, mean, cov in comps:
            mean = np.asarray(mean, dtype=np.float64)
            if mean.ndim != 1:
                raise ValueError("component mean must be a vector")
            if dim is None:
                dim = len(mean)
            elif len(mean) != dim:
                raise ValueError("all component means must share one dimension")
            cov = np.asarray(cov, dtype=np.float64)
            if cov.ndim == 0:
                cov = float(cov) * np.eye(dim)
            elif cov.ndim == 1:
                cov = np.diag(cov)
            if cov.shape != (dim, dim):
                raise ValueError(f"covariance must be {dim}x{dim}")
            if not np.allclose(cov, cov.T):
                raise ValueError("covariance must be symmetric")
            if np.min(np.linalg.eigvalsh(cov)) <= 0.0:
                raise ValueError("covariance must be positive definite")
            mean.setflags(write=False)
            cov.setflags(write=False)
            frozen_comps.append(Component(float(weight), mean, cov))
        wsum = sum(c.weight for c in frozen_comps)
        if abs(wsum - 1.0) > _PROB_TOL:
            raise ValueError(f"component weights sum to {wsum}, expected 1")
        built.append(ClassSpec(float(prior), tuple(frozen_comps)))
    psum = sum(c.prior for c in built)
    if abs(psum - 1.0) > _PROB_TOL:
        raise ValueError(f"class priors sum to {psum}, expected 1")
    return GmmSpec(tuple(built))


def two_class_benchmark() -> GmmSpec:
    """Default 2-D benchmark: two classes, two spherical components each.

    Classes are separated along the first coordinate with components stacked
    along the second; the gap is wide enough that the Bayes error is far
    below 1%.
    """
    v = 0.05
    return make_spec(
        [
            (0.5, [(0.5, [-1.0, -0.8], v), (0.5, [-1.0, 0.8], v)]),
            (0.5, [(0.5, [1.0, -0.8], v), (0.5, [1.0, 0.8], v)]),
        ]
    )


def three_class_benchmark() -> GmmSpec:
    """2-D multi-class variant: three equally likely spherical classes."""
    v = 0.05
    r = 1.4
    angles = [np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3]
    return make_spec(
        [(1.0 / 3.0, [(1.0, [r * np.cos(a), r * np.sin(a)], v)]) for a in angles]
    )


def sample_dataset(spec: GmmSpec, n: int, seed: int) -> LabeledDataset:
    """Draw n labeled points; deterministic in seed."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(seed)
    labels = rng.choice(spec.n_classes, size=n, p=spec.priors())
    points = np.empty((n, spec.dim))
    for y, cls in enumerate(spec.classes):
        mask = labels == y
        if np.any(mask):
            points[mask] = _sample_class(cls, int(mask.sum()), rng)
    points.setflags(write=False)
    labels.setflags(write=False)
    return LabeledDataset(points, labels, seed)


def sample_class_points(spec: GmmSpec, y: int, n: int, rng) -> np.ndarray:
    """Draw n points from class y's mixture using the supplied generator."""
    _check_class(spec, y)
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    return _sample_class(spec.classes[y], n, rng)


def _sample_class(cls: ClassSpec, n: int, rng) -> np.ndarray:
    weights = np.array([c.weight for c in cls.components])
    which = rng.choice(len(cls.components), size=n, p=weights)
    dim = len(cls.components[0].mean)
    out = np.empty((n, dim))
    z = rng.standard_normal((n, dim))
    for k, comp in enumerate(cls.components):
        mask = which == k
        if np.any(mask):
            chol = np.linalg.cholesky(comp.cov)
            out[mask] = comp.mean + z[mask] @ chol.T
    return out


def log_class_density(spec: GmmSpec, y: int, x) -> np.ndarray | float:
    """log sum_k w_k N(x; mu_k, Sigma_k) for class y, stable for small values."""
    _check_class(spec, y)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    comps = spec.classes[y].components
    logs = np.stack(
        [np.log(c.weight) + _log_gaussian(X, c.mean, c.cov) for c in comps], axis=1
    )
    out = _logsumexp(logs, axis=1)
    return float(out[0]) if single else out


def class_density(spec: GmmSpec, y: int, x) -> np.ndarray | float:
    return np.exp(log_class_density(spec, y, x))


def pooled_components(spec: GmmSpec) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Class-marginalized mixture: weights prior*w, stacked means and covs."""
    w, mu, cov = [], [], []
    for cls in spec.classes:
        for comp in cls.components:
            w.append(cls.prior * comp.weight)
            mu.append(comp.mean)
            cov.append(comp.cov)
    return np.array(w), np.stack(mu), np.stack(cov)


def _log_gaussian(X: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = len(mean)
    vals, vecs = np.linalg.eigh(cov)
    diff = (X - mean) @ vecs
    quad = np.sum(diff * diff / vals, axis=1)
    logdet = np.sum(np.log(vals))
    return -0.5 * (quad + logdet + d * np.log(2.0 * np.pi))


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def _check_class(spec: GmmSpec, y: int) -> None:
    if not 0 <= y < spec.n_classes:
        raise ValueError(f"class index {y} outside [0, {spec.n_classes})")


def save_dataset_csv(dataset: LabeledDataset, path) -> None:
    d = dataset.points.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow([f"x{i}" for i in range(d)] + ["label"])
        for row, label in zip(dataset.points, dataset.labels):
            writer.writerow([format(v, ".17g") for v in row] + [int(label)])


def load_dataset_csv(path, seed: int = -1) -> LabeledDataset:
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        d = len(header) - 1
        points, labels = [], []
        for row in reader:
            points.append([float(v) for v in row[:d]])
            labels.append(int(row[d]))
    pts = np.asarray(points, dtype=np.float64)
    labs = np.asarray(labels, dtype=np.int64)
    pts.setflags(write=False)
    labs.setflags(write=False)
    return LabeledDataset(pts, labs, seed)
