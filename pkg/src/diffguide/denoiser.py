"""Exact noise predictor for Gaussian-mixture data.

Under the forward marginal, a mixture component N(mu_k, Sigma_k) contributes
N(sqrt(ab_t) mu_k, ab_t Sigma_k + (1 - ab_t) I) at step t, writing ab_t for
the cumulative product alpha_bar_t. The conditional mean of the clean point
given the noisy one is therefore available in closed form:

    E[x0 | x_t] = sum_k r_k(x_t) (mu_k + sqrt(ab_t) Sigma_k S_k^{-1} (x_t - sqrt(ab_t) mu_k))

with S_k = ab_t Sigma_k + (1 - ab_t) I and responsibilities r_k proportional
to w_k N(x_t; sqrt(ab_t) mu_k, S_k). This plays the role of an optimally
trained denoising network, and because it is differentiable in closed form
the full input Jacobian is exact as well, which is what guidance through the
denoised prediction needs.

The mixture is pooled over classes (the denoiser is unconditional); class
information enters sampling only through the guiding classifier.
"""

import numpy as np

from . import classifier as clf
from .schedule import Schedule
from .synthdata import GmmSpec, pooled_components

_EIG_FLOOR = 1e-12


class AnalyticDenoiser:
    """Closed-form posterior-mean denoiser for a pooled Gaussian mixture.

    Immutable after construction; all methods are pure and accept a single
    point (d,) or a batch (n, d).
    """

    def __init__(self, spec: GmmSpec, schedule: Schedule):
        self.spec = spec
        self.schedule = schedule
        weights, means, covs = pooled_components(spec)
        if abs(weights.sum() - 1.0) > 1e-12:
            raise ValueError("pooled component weights must sum to 1")
        self.weights = weights
        self.means = means
        vals, vecs = np.linalg.eigh(covs)
        self.cov_eigvals = np.maximum(vals, _EIG_FLOOR)  # (K, d)
        self.cov_eigvecs = vecs  # (K, d, d), columns are eigenvectors
        self.dim = means.shape[1]

    # -- internal -----------------------------------------------------------

    def _stats(self, X: np.ndarray, t: int):
        """Responsibilities, per-component posterior means, and log-density
        pulls at (X, t); everything downstream is assembled from these."""
        ab = self.schedule.alpha_bar(t)
        sa = np.sqrt(ab)
        marg = ab * self.cov_eigvals + (1.0 - ab)  # (K, d) marginal eigvals
        diff = X[:, None, :] - sa * self.means[None, :, :]  # (n, K, d)
        proj = np.einsum("kde,nkd->nke", self.cov_eigvecs, diff)
        quad = np.sum(proj * proj / marg[None], axis=2)
        log_r = (
            np.log(self.weights)[None]
            - 0.5 * (quad + np.sum(np.log(2.0 * np.pi * marg), axis=1)[None])
        )
        m = np.max(log_r, axis=1, keepdims=True)
        r = np.exp(log_r - m)
        r /= r.sum(axis=1, keepdims=True)  # (n, K)
        # component posterior means mu_k + sa * Sigma_k S_k^{-1} diff
        pull = np.einsum("kde,nke->nkd", self.cov_eigvecs, proj * (self.cov_eigvals / marg)[None])
        comp_mean = self.means[None] + sa * pull  # (n, K, d)
        # gradient of each component's log marginal density: -S_k^{-1} diff
        dens_grad = -np.einsum("kde,nke->nkd", self.cov_eigvecs, proj / marg[None])
        return ab, sa, marg, r, comp_mean, dens_grad

    @staticmethod
    def _as_batch(x):
        x = np.asarray(x, dtype=np.float64)
        return (x[None, :], True) if x.ndim == 1 else (x, False)

    def _bundle(self, X: np.ndarray, t: int, with_jacobian: bool = False):
        """Posterior mean and (optionally) its Jacobian from one stats pass;
        the shared path keeps the sampler from recomputing responsibilities."""
        _, sa, marg, r, comp_mean, dens_grad = self._stats(X, t)
        E = np.einsum("nk,nkd->nd", r, comp_mean)
        if not with_jacobian:
            return E, None
        scaled = self.cov_eigvecs * (self.cov_eigvals / marg)[:, None, :]
        A = sa * np.einsum("kde,kfe->kdf", scaled, self.cov_eigvecs)  # (K, d, d)
        J = np.einsum("nk,kdf->ndf", r, A)
        J += np.einsum("nk,nkd,nkf->ndf", r, comp_mean, dens_grad)
        gbar = np.einsum("nk,nkd->nd", r, dens_grad)
        J -= E[:, :, None] * gbar[:, None, :]
        return E, J

    # -- public -------------------------------------------------------------

    def posterior_mean_x0(self, x_t, t: int) -> np.ndarray:
        """E[x0 | x_t] under the pooled mixture."""
        X, single = self._as_batch(x_t)
        out, _ = self._bundle(X, t)
        return out[0] if single else out

    def epsilon(self, x_t, t: int) -> np.ndarray:
        """Implied noise prediction (x_t - sqrt(ab_t) E[x0|x_t]) / sqrt(1 - ab_t)."""
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise ValueError(f"alpha_bar({t}) = 1: noise prediction undefined")
        X, single = self._as_batch(x_t)
        e = (X - np.sqrt(ab) * self.posterior_mean_x0(X, t)) / np.sqrt(1.0 - ab)
        return e[0] if single else e

    def x0_prediction(self, x_t, t: int) -> np.ndarray:
        """One-step clean-data estimate x_t/sqrt(ab_t) - sqrt(1-ab_t)/sqrt(ab_t) * eps.

        Algebraically identical to posterior_mean_x0; kept as the literal
        rearrangement so the identity is testable.
        """
        ab = self.schedule.alpha_bar(t)
        if ab >= 1.0:
            raise ValueError(f"alpha_bar({t}) = 1: prediction undefined")
        X, single = self._as_batch(x_t)
        sa = np.sqrt(ab)
        out = X / sa - (np.sqrt(1.0 - ab) / sa) * self.epsilon(X, t)
        return out[0] if single else out

    def x0_jacobian(self, x_t, t: int, mode: str = "full") -> np.ndarray:
        """d x0_prediction / d x_t, shape (d, d) or (n, d, d).

        "full" differentiates the closed form, including the responsibility
        shifts between components; "stop_gradient" treats the noise prediction
        as a constant, leaving only the 1/sqrt(ab_t) rescaling.
        """
        if mode not in ("full", "stop_gradient"):
            raise ValueError("mode must be 'full' or 'stop_gradient'")
        X, single = self._as_batch(x_t)
        n = len(X)
        ab = self.schedule.alpha_bar(t)
        if mode == "stop_gradient":
            J = np.broadcast_to(np.eye(self.dim) / np.sqrt(ab), (n, self.dim, self.dim)).copy()
            return J[0] if single else J
        _, J = self._bundle(X, t, with_jacobian=True)
        return J[0] if single else J


def guided_log_prob_gradient(
    dn: AnalyticDenoiser,
    h: clf.ClassifierHandle,
    x_t,
    t: int,
    y,
    path: str = "raw",
    jacobian_mode: str = "full",
    objective: str = "log_softmax",
) -> np.ndarray:
    """Guidance gradient at a noisy point.

    path "raw" differentiates the classifier objective directly at x_t;
    "x0pred" evaluates it at the denoised estimate and pulls the gradient
    back through the denoiser Jacobian (or the stop-gradient rescaling).
    """
    if path not in ("raw", "x0pred"):
        raise ValueError("path must be 'raw' or 'x0pred'")
    X, single = AnalyticDenoiser._as_batch(x_t)
    if path == "raw":
        g = clf.input_gradient(h, X, y, objective)
    else:
        x0 = dn.posterior_mean_x0(X, t)
        v = clf.input_gradient(h, x0, y, objective)
        if jacobian_mode == "stop_gradient":
            g = v / np.sqrt(dn.schedule.alpha_bar(t))
        else:
            J = dn.x0_jacobian(X, t, mode=jacobian_mode)
            g = np.einsum("npq,np->nq", J, v)
    return g[0] if single else g
