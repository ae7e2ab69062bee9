"""One evaluation/gradient interface over three classifier personas.

non_robust wraps a network trained on clean data, robust wraps one trained on
forward-noised data, and bayes_oracle scores classes exactly from the known
mixture (logits are log joint densities, so its softmax is the true
posterior). The oracle is the unbiased judge for generated samples; the
trained personas are the guidance subjects.
"""

from dataclasses import dataclass

import numpy as np

from . import nn
from .synthdata import GmmSpec, log_class_density
from .schedule import Schedule

_KINDS = ("non_robust", "robust", "bayes_oracle")


@dataclass(frozen=True)
class ClassifierHandle:
    kind: str
    model: nn.MlpModel | None = None
    spec: GmmSpec | None = None

    @property
    def n_classes(self) -> int:
        return self.spec.n_classes if self.kind == "bayes_oracle" else self.model.n_classes


def non_robust(model: nn.MlpModel) -> ClassifierHandle:
    return ClassifierHandle("non_robust", model=model)


def robust(model: nn.MlpModel) -> ClassifierHandle:
    return ClassifierHandle("robust", model=model)


def bayes_oracle(spec: GmmSpec) -> ClassifierHandle:
    return ClassifierHandle("bayes_oracle", spec=spec)


def predict_logits(h: ClassifierHandle, x) -> np.ndarray:
    """Class logits at x; oracle logits are log(prior * class density)."""
    if h.kind not in _KINDS:
        raise ValueError(f"unknown classifier kind {h.kind!r}")
    if h.kind == "bayes_oracle":
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        cols = [
            np.log(cls.prior) + log_class_density(h.spec, y, X)
            for y, cls in enumerate(h.spec.classes)
        ]
        logits = np.stack(cols, axis=1)
        return logits[0] if single else logits
    return nn.forward(h.model, x)


def input_gradient(h: ClassifierHandle, x, y, objective: str = "log_softmax") -> np.ndarray:
    """Gradient of the class-y objective w.r.t. the input, for any persona."""
    if h.kind != "bayes_oracle":
        return nn.input_gradient(h.model, x, y, objective)
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    n = len(X)
    ys = np.full(n, y, dtype=np.int64) if np.ndim(y) == 0 else np.asarray(y, dtype=np.int64)
    grads = np.stack(
        [_class_logdensity_gradient(h.spec, c, X) for c in range(h.spec.n_classes)], axis=1
    )  # (n, D, d): gradient of each class logit (priors are constants)
    grad_y = grads[np.arange(n), ys]
    if objective == "logit":
        out = grad_y
    else:
        logits = predict_logits(h, X)
        p = np.exp(nn.log_softmax(logits))
        out = grad_y - np.einsum("nc,ncd->nd", p, grads)
    return out[0] if single else out


def _class_logdensity_gradient(spec: GmmSpec, y: int, X: np.ndarray) -> np.ndarray:
    """d/dx log sum_k w_k N(x; mu_k, Sigma_k): responsibility-weighted pulls."""
    comps = spec.classes[y].components
    logs, pulls = [], []
    for c in comps:
        vals, vecs = np.linalg.eigh(c.cov)
        diff = X - c.mean
        proj = diff @ vecs
        quad = np.sum(proj * proj / vals, axis=1)
        logs.append(
            np.log(c.weight)
            - 0.5 * (quad + np.sum(np.log(vals)) + len(c.mean) * np.log(2.0 * np.pi))
        )
        pulls.append(-(proj / vals) @ vecs.T)
    logs = np.stack(logs, axis=1)
    m = np.max(logs, axis=1, keepdims=True)
    resp = np.exp(logs - m)
    resp /= resp.sum(axis=1, keepdims=True)
    return np.einsum("nk,nkd->nd", resp, np.stack(pulls, axis=1))


def accuracy(
    h: ClassifierHandle,
    points: np.ndarray,
    labels: np.ndarray,
    preprocess: str = "none",
    *,
    t: int | None = None,
    schedule: Schedule | None = None,
    denoiser=None,
    seed: int = 0,
) -> float:
    """Fraction of argmax-correct predictions after optional preprocessing.

    preprocess "forward_noise" replaces each point by a freshly noised version
    at step t; "x0_pred" additionally maps the noised point back through the
    denoiser's one-step clean-data estimate before classifying.
    """
    X = np.asarray(points, dtype=np.float64)
    ys = np.asarray(labels, dtype=np.int64)
    if preprocess not in ("none", "forward_noise", "x0_pred"):
        raise ValueError(f"unknown preprocess {preprocess!r}")
    if preprocess != "none":
        if t is None or schedule is None:
            raise ValueError("noised preprocessing needs t and a schedule")
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal(X.shape)
        ab = schedule.alpha_bar(t)
        X = np.sqrt(ab) * X + np.sqrt(1.0 - ab) * eps
        if preprocess == "x0_pred":
            if denoiser is None:
                raise ValueError("x0_pred preprocessing needs a denoiser")
            X = denoiser.posterior_mean_x0(X, t)
    pred = np.argmax(predict_logits(h, X), axis=1)
    return float(np.mean(pred == ys))
