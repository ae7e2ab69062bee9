"""Gradient stabilizers and the guided reverse sampler.

The sampler walks t = T..1. At each step it computes the classifier guidance
gradient, passes it through a running stabilizer, draws the unguided reverse
transition, and then shifts the result by scale * variance * stabilized
gradient. The stabilizers are running moments without de-biasing: starting
from zero deliberately biases early guidance toward zero, when the chain
state is nearly pure noise and classifier gradients are least reliable.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import classifier as clf
from .classifier import ClassifierHandle
from .denoiser import AnalyticDenoiser
from .rng import substream
from .schedule import Schedule, reverse_coefficients


class GuidanceDivergence(RuntimeError):
    """A chain produced a non-finite state; carries the step index."""

    def __init__(self, t: int):
        super().__init__(f"guidance diverged at step t={t}")
        self.t = t


# -- stabilizers -------------------------------------------------------------


@dataclass(frozen=True)
class StabilizerConfig:
    kind: str = "identity"  # identity | ema | adam
    beta: float = 0.99  # ema window
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("identity", "ema", "adam"):
            raise ValueError(f"unknown stabilizer kind {self.kind!r}")
        if self.kind == "ema" and not 0.0 <= self.beta < 1.0:
            raise ValueError("ema beta must lie in [0, 1)")
        if self.kind == "adam":
            if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
                raise ValueError("adam betas must lie in [0, 1)")
            if self.eps <= 0.0:
                raise ValueError("adam eps must be > 0")

    @property
    def label(self) -> str:
        if self.kind == "ema":
            return f"ema({self.beta:g})"
        if self.kind == "adam":
            return f"adam({self.beta1:g},{self.beta2:g})"
        return "identity"


def identity() -> StabilizerConfig:
    return StabilizerConfig("identity")


def ema(beta: float) -> StabilizerConfig:
    return StabilizerConfig("ema", beta=beta)


def adam(beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> StabilizerConfig:
    return StabilizerConfig("adam", beta1=beta1, beta2=beta2, eps=eps)


@dataclass(frozen=True)
class StabilizerState:
    """Running first/second moments, zero-initialized, no de-biasing."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0


def init_stabilizer_state(shape) -> StabilizerState:
    return StabilizerState(np.zeros(shape), np.zeros(shape), 0)


def stabilize(
    state: StabilizerState, cfg: StabilizerConfig, g: np.ndarray
) -> tuple[StabilizerState, np.ndarray]:
    """Apply one stabilizer update; pure, returns (new state, output).

    identity passes g through; ema tracks beta * m + (1 - beta) * g; adam
    rescales the beta1 first moment by the root of the beta2 second moment
    of g**2, elementwise, plus eps. No de-biasing anywhere.
    """
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.m.shape:
        raise ValueError(f"gradient shape {g.shape} != state shape {state.m.shape}")
    if cfg.kind == "identity":
        return replace(state, step=state.step + 1), g
    if cfg.kind == "ema":
        m = cfg.beta * state.m + (1.0 - cfg.beta) * g
        return StabilizerState(m, state.v, state.step + 1), m
    m = cfg.beta1 * state.m + (1.0 - cfg.beta1) * g
    v = cfg.beta2 * state.v + (1.0 - cfg.beta2) * g * g
    return StabilizerState(m, v, state.step + 1), m / (np.sqrt(v) + cfg.eps)


# -- guided sampling ---------------------------------------------------------


@dataclass(frozen=True)
class GuidanceConfig:
    classifier: ClassifierHandle
    target_class: int
    scale: float = 1.0
    path: str = "raw"  # raw | x0pred
    jacobian_mode: str = "full"  # full | stop_gradient
    stabilizer: StabilizerConfig = field(default_factory=identity)
    objective: str = "log_softmax"  # log_softmax | logit

    def __post_init__(self):
        if not np.isfinite(self.scale) or self.scale < 0.0:
            raise ValueError("scale must be finite and >= 0")
        if self.path not in ("raw", "x0pred"):
            raise ValueError("path must be 'raw' or 'x0pred'")
        if self.jacobian_mode not in ("full", "stop_gradient"):
            raise ValueError("jacobian_mode must be 'full' or 'stop_gradient'")


@dataclass
class BatchResult:
    samples: np.ndarray  # (n, d); rows of diverged chains are NaN
    diverged: np.ndarray  # (n,) bool
    diverged_t: np.ndarray  # (n,) step of divergence, -1 for healthy chains

    @property
    def n_diverged(self) -> int:
        return int(self.diverged.sum())

    def kept(self) -> np.ndarray:
        return self.samples[~self.diverged]


_CHAIN_LABEL = "chain"


def reverse_step(dn: AnalyticDenoiser, schedule: Schedule, x_t, t: int, rng) -> np.ndarray:
    """One unguided reverse transition; the final step t = 1 is noiseless."""
    x_t = np.asarray(x_t, dtype=np.float64)
    z = rng.standard_normal(x_t.shape) if t > 1 else np.zeros_like(x_t)
    return _reverse_step_math(dn, schedule, x_t, t, z)


def _reverse_step_math(dn, schedule, x_t, t, z):
    coeff_x, coeff_eps, sigma_sq = reverse_coefficients(schedule, t)
    return coeff_x * x_t - coeff_eps * dn.epsilon(x_t, t) + np.sqrt(sigma_sq) * z


def _pregenerate_noise(chain_indices, T: int, d: int, seed: int):
    """Per-chain substreams: chain i draws its start, then one z per step
    t = T..2, in that order. Chains never share a stream."""
    n = len(chain_indices)
    starts = np.empty((n, d))
    zs = np.empty((n, max(T - 1, 0), d))
    for row, i in enumerate(chain_indices):
        gen = substream(seed, _CHAIN_LABEL, int(i))
        starts[row] = gen.standard_normal(d)
        if T > 1:
            zs[row] = gen.standard_normal((T - 1, d))
    return starts, zs


def _run_chains(
    dn: AnalyticDenoiser,
    schedule: Schedule,
    cfg: GuidanceConfig | None,
    n: int,
    seed: int,
    collect_trace: bool = False,
    chain_indices=None,
):
    T, d = schedule.T, dn.dim
    if chain_indices is None:
        chain_indices = range(n)
    x, zs = _pregenerate_noise(chain_indices, T, d, seed)
    n = len(x)
    diverged_t = np.full(n, -1, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    if cfg is not None:
        state = init_stabilizer_state((n, d))
    trace = [] if collect_trace else None
    with np.errstate(all="ignore"):
        for t in range(T, 0, -1):
            ab = schedule.alpha_bar(t)
            sa = np.sqrt(ab)
            # one posterior pass feeds the guidance gradient and the reverse
            # step's noise prediction
            need_j = cfg is not None and cfg.path == "x0pred" and cfg.jacobian_mode == "full"
            mean_x0, jac = dn._bundle(x, t, with_jacobian=need_j)
            shift = None
            if cfg is not None:
                if cfg.path == "raw":
                    g = clf.input_gradient(cfg.classifier, x, cfg.target_class, cfg.objective)
                else:
                    v = clf.input_gradient(cfg.classifier, mean_x0, cfg.target_class, cfg.objective)
                    g = np.einsum("npq,np->nq", jac, v) if need_j else v / sa
                state, nu = stabilize(state, cfg.stabilizer, g)
                shift = cfg.scale * schedule.sigma_sq(t) * nu
            eps_hat = (x - sa * mean_x0) / np.sqrt(1.0 - ab)
            coeff_x, coeff_eps, sigma_sq = reverse_coefficients(schedule, t)
            x_next = coeff_x * x - coeff_eps * eps_hat
            if t > 1:
                x_next += np.sqrt(sigma_sq) * zs[:, T - t]
            if shift is not None:
                x_next = x_next + shift
            bad = active & ~np.all(np.isfinite(x_next), axis=1)
            if np.any(bad):
                diverged_t[bad] = t
                active[bad] = False
                x_next[~active] = np.nan
            x = x_next
            if collect_trace:
                trace.append(
                    {
                        "t": t,
                        "x": x.copy(),
                        "g": None if cfg is None else g.copy(),
                        "nu": None if cfg is None else nu.copy(),
                    }
                )
    result = BatchResult(x, ~active, diverged_t)
    return (result, trace) if collect_trace else result


def sample_batch(
    dn: AnalyticDenoiser,
    schedule: Schedule,
    cfg: GuidanceConfig,
    n: int,
    seed: int,
    chain_indices=None,
) -> BatchResult:
    """n independent guided chains; chain i uses RNG substream (seed, chain, i).

    Diverged chains are flagged and left as NaN rows rather than raising, so
    a partially failing configuration is still measurable. chain_indices
    selects which substream indices to run (default 0..n-1), so a batch can
    be sharded or reordered without changing any chain's outcome.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return _run_chains(dn, schedule, cfg, n, seed, chain_indices=chain_indices)


def unconditional_batch(dn: AnalyticDenoiser, schedule: Schedule, n: int, seed: int) -> BatchResult:
    """Plain reverse-process sampling, same RNG layout as sample_batch."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    return _run_chains(dn, schedule, None, n, seed)


def guided_sample(
    dn: AnalyticDenoiser,
    schedule: Schedule,
    cfg: GuidanceConfig,
    seed: int,
    return_trace: bool = False,
):
    """Single guided chain on substream 0; raises GuidanceDivergence on blowup."""
    out = _run_chains(dn, schedule, cfg, 1, seed, collect_trace=return_trace)
    result, trace = out if return_trace else (out, None)
    if result.diverged[0]:
        raise GuidanceDivergence(int(result.diverged_t[0]))
    sample = result.samples[0]
    return (sample, trace) if return_trace else sample
