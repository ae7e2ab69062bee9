"""Forward-process diagnostics: how classifier outputs move along coupled
noise trajectories.

All metrics compare a point x_t with its less-noisy sibling x_{t-1} built
from the same clean point and the same noise draw, so the only difference
between the two inputs is the schedule coefficients. Ratios are reported per
step: logit sensitivity is ||f(x_t) - f(x_{t-1})|| / ||x_t - x_{t-1}||, and
gradient sensitivity replaces the logits by guidance gradients. Pairs with a
zero input distance are undefined and excluded from aggregation.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierHandle, predict_logits
from .denoiser import AnalyticDenoiser, guided_log_prob_gradient
from .guidance import StabilizerConfig, init_stabilizer_state, stabilize
from .schedule import Schedule

_METRICS = ("logit", "gradient", "stabilized_gradient")


@dataclass
class SensitivityCurve:
    metric: str
    path: str
    stabilizer: str  # label, "none" for unstabilized metrics
    t: np.ndarray  # step indices 2..T
    mean: np.ndarray
    std: np.ndarray
    count: np.ndarray  # defined pairs per step

    @property
    def degenerate(self) -> bool:
        return int(self.count.max(initial=0)) == 0


def coupled_trajectory(schedule: Schedule, x0, eps) -> np.ndarray:
    """All of x_1..x_T from one clean point and one shared noise draw; (T, d)."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    sa = np.sqrt(schedule.alpha_bars)[:, None]
    sb = np.sqrt(1.0 - schedule.alpha_bars)[:, None]
    return sa * x0[None, :] + sb * eps[None, :]


def logit_sensitivity(h: ClassifierHandle, x_a, x_b) -> float:
    """Logit-change to input-change ratio; NaN when the inputs coincide."""
    x_a = np.asarray(x_a, dtype=np.float64)
    x_b = np.asarray(x_b, dtype=np.float64)
    den = float(np.linalg.norm(x_a - x_b))
    if den == 0.0:
        return float("nan")
    num = float(np.linalg.norm(predict_logits(h, x_a) - predict_logits(h, x_b)))
    return num / den


def gradient_sensitivity(
    h: ClassifierHandle,
    dn: AnalyticDenoiser,
    x_t,
    x_tm1,
    t: int,
    y: int,
    path: str = "raw",
    jacobian_mode: str = "full",
    objective: str = "log_softmax",
) -> float:
    """Guidance-gradient-change to input-change ratio between steps t, t-1."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x_tm1 = np.asarray(x_tm1, dtype=np.float64)
    den = float(np.linalg.norm(x_t - x_tm1))
    if den == 0.0:
        return float("nan")
    g_t = guided_log_prob_gradient(dn, h, x_t, t, y, path, jacobian_mode, objective)
    g_tm1 = guided_log_prob_gradient(dn, h, x_tm1, t - 1, y, path, jacobian_mode, objective)
    return float(np.linalg.norm(g_t - g_tm1)) / den


def stabilized_gradient_sensitivity(
    h: ClassifierHandle,
    dn: AnalyticDenoiser,
    trajectory: np.ndarray,
    y: int,
    path: str,
    stabilizer: StabilizerConfig,
    jacobian_mode: str = "full",
    objective: str = "log_softmax",
) -> tuple[np.ndarray, np.ndarray]:
    """Sensitivity of stabilizer outputs along one coupled trajectory.

    Walks t = T..1 in the sampling direction with a fresh zero state, feeding
    each step's guidance gradient through the stabilizer; the ratio at index
    t compares the outputs at steps t and t-1 against the input distance.
    Returns (step indices 2..T, values in that order).
    """
    traj = np.asarray(trajectory, dtype=np.float64)
    T = len(traj)
    state = init_stabilizer_state(traj.shape[1])
    vals = np.full(T - 1, np.nan)
    prev_nu = None
    for t in range(T, 0, -1):
        g = guided_log_prob_gradient(dn, h, traj[t - 1], t, y, path, jacobian_mode, objective)
        state, nu = stabilize(state, stabilizer, g)
        if prev_nu is not None:
            den = float(np.linalg.norm(traj[t] - traj[t - 1]))
            if den > 0.0:
                vals[t - 1] = float(np.linalg.norm(prev_nu - nu)) / den
        prev_nu = nu
    return np.arange(2, T + 1), vals


def curve(
    h: ClassifierHandle,
    dn: AnalyticDenoiser,
    points: np.ndarray,
    labels: np.ndarray,
    metric: str,
    path: str = "raw",
    stabilizer: StabilizerConfig | None = None,
    seed: int = 0,
    y_mode: str | int = "true_label",
    jacobian_mode: str = "full",
    objective: str = "log_softmax",
) -> SensitivityCurve:
    """Per-step mean/std of a sensitivity metric over a dataset.

    Every sample gets one shared noise draw for its whole trajectory. The
    target class for gradients is the sample's own label unless y_mode fixes
    a class index. Undefined (zero-distance) pairs are dropped per step and
    the remaining count recorded.
    """
    if metric not in _METRICS:
        raise ValueError(f"metric must be one of {_METRICS}")
    if metric == "stabilized_gradient" and stabilizer is None:
        raise ValueError("stabilized_gradient needs a stabilizer config")
    schedule = dn.schedule
    X0 = np.asarray(points, dtype=np.float64)
    ys = (
        np.asarray(labels, dtype=np.int64)
        if y_mode == "true_label"
        else np.full(len(X0), int(y_mode), dtype=np.int64)
    )
    n, d = X0.shape
    T = schedule.T
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal((n, d))
    sa = np.sqrt(schedule.alpha_bars)
    sb = np.sqrt(1.0 - schedule.alpha_bars)

    ratios = np.full((T - 1, n), np.nan)  # row i = step t = i + 2
    if metric == "stabilized_gradient":
        state = init_stabilizer_state((n, d))
        prev_nu = prev_x = None
        for t in range(T, 0, -1):
            X_t = sa[t - 1] * X0 + sb[t - 1] * eps
            g = guided_log_prob_gradient(dn, h, X_t, t, ys, path, jacobian_mode, objective)
            state, nu = stabilize(state, stabilizer, g)
            if prev_nu is not None:
                _ratio_into(ratios[t - 1], prev_nu - nu, prev_x - X_t)
            prev_nu, prev_x = nu, X_t
    else:
        prev_f = prev_x = None
        for t in range(1, T + 1):
            X_t = sa[t - 1] * X0 + sb[t - 1] * eps
            if metric == "logit":
                pts = dn.posterior_mean_x0(X_t, t) if path == "x0pred" else X_t
                f = predict_logits(h, pts)
            else:
                f = guided_log_prob_gradient(dn, h, X_t, t, ys, path, jacobian_mode, objective)
            if prev_f is not None:
                _ratio_into(ratios[t - 2], f - prev_f, X_t - prev_x)
            prev_f, prev_x = f, X_t

    defined = ~np.isnan(ratios)
    counts = defined.sum(axis=1)
    filled = np.where(defined, ratios, 0.0)
    with np.errstate(all="ignore"):
        means = filled.sum(axis=1) / counts
        centered = np.where(defined, ratios - means[:, None], 0.0)
        stds = np.sqrt((centered**2).sum(axis=1) / counts)
    means[counts == 0] = np.nan
    stds[counts == 0] = np.nan
    label = "none" if stabilizer is None else stabilizer.label
    return SensitivityCurve(
        metric, path, label, np.arange(2, T + 1), means, stds, counts.astype(np.int64)
    )


def _ratio_into(out: np.ndarray, num: np.ndarray, den: np.ndarray) -> None:
    d = np.linalg.norm(den, axis=1)
    ok = d > 0.0
    out[ok] = np.linalg.norm(num, axis=1)[ok] / d[ok]


def save_curve_csv(curve_obj: SensitivityCurve, path, config_hash: str = "") -> None:
    with open(path, "w", newline="") as f:
        if config_hash:
            f.write(f"# config_hash: {config_hash}\n")
        writer = csv.writer(f)
        writer.writerow(["t", "mean", "std", "count", "metric", "path", "stabilizer"])
        for i, t in enumerate(curve_obj.t):
            writer.writerow(
                [
                    int(t),
                    format(curve_obj.mean[i], ".17g"),
                    format(curve_obj.std[i], ".17g"),
                    int(curve_obj.count[i]),
                    curve_obj.metric,
                    curve_obj.path,
                    curve_obj.stabilizer,
                ]
            )
