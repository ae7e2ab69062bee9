"""Small feed-forward classifier with explicit forward and backward passes.

The network exposes two gradient paths: parameter gradients for training and
input gradients for guidance. Both are hand-written reverse-mode passes over
the same stored activations, so the input gradient is exact (verified against
finite differences in the test suite), not an autodiff black box.

Hidden layers use a smooth activation (tanh by default) so input gradients
vary continuously; the output layer is affine.
"""

import json
from dataclasses import dataclass

import numpy as np

from .schedule import Schedule

_ACTIVATIONS = ("tanh", "softplus")
_OBJECTIVES = ("log_softmax", "logit")


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


@dataclass(frozen=True)
class MlpModel:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    activation: str = "tanh"

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def n_classes(self) -> int:
        return self.weights[-1].shape[1]


def init_mlp(layer_sizes: list[int], activation: str = "tanh", seed: int = 0) -> MlpModel:
    """Symmetric uniform init scaled by 1/sqrt(fan_in); deterministic in seed."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least input and output sizes")
    if activation not in _ACTIVATIONS:
        raise ValueError(f"activation must be one of {_ACTIVATIONS}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(rng.uniform(-bound, bound, size=fan_out))
    return MlpModel(tuple(weights), tuple(biases), activation)


def _act(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return np.tanh(z)
    return np.logaddexp(0.0, z)  # softplus


def _act_grad(z: np.ndarray, a: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        return 1.0 - a * a
    return 1.0 / (1.0 + np.exp(-z))  # sigmoid


def _forward_cached(model: MlpModel, X: np.ndarray):
    """Forward pass keeping pre-activations and activations for backprop."""
    zs, acts = [], [X]
    a = X
    n_layers = len(model.weights)
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ W + b
        zs.append(z)
        a = _act(z, model.activation) if i < n_layers - 1 else z
        acts.append(a)
    return zs, acts


def forward(model: MlpModel, x) -> np.ndarray:
    """Logits for a single point (d,) or a batch (n, d)."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.shape[1] != model.input_dim:
        raise ValueError(f"input dim {X.shape[1]} != model dim {model.input_dim}")
    _, acts = _forward_cached(model, X)
    return acts[-1][0] if single else acts[-1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    m = np.max(logits, axis=-1, keepdims=True)
    shifted = logits - m
    return shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))


def log_softmax_target(logits, y) -> np.ndarray | float:
    """log p(y) under the softmax of the logits, max-shifted for stability."""
    ls = log_softmax(logits)
    if ls.ndim == 1:
        return float(ls[y])
    return np.take_along_axis(ls, np.asarray(y).reshape(-1, 1), axis=1)[:, 0]


def _backprop_input(model: MlpModel, zs, acts, dlogits: np.ndarray) -> np.ndarray:
    delta = dlogits
    for i in range(len(model.weights) - 1, -1, -1):
        dx = delta @ model.weights[i].T
        if i > 0:
            delta = dx * _act_grad(zs[i - 1], acts[i], model.activation)
    return dx


def input_gradient(model: MlpModel, x, y, objective: str = "log_softmax") -> np.ndarray:
    """Gradient of the target-class objective with respect to the input.

    objective "log_softmax" differentiates log p(y | x); "logit" differentiates
    the raw class-y logit. y is scalar or per-row for batched x.
    """
    if objective not in _OBJECTIVES:
        raise ValueError(f"objective must be one of {_OBJECTIVES}")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    zs, acts = _forward_cached(model, X)
    logits = acts[-1]
    n, D = logits.shape
    ys = np.full(n, y, dtype=np.int64) if np.ndim(y) == 0 else np.asarray(y, dtype=np.int64)
    onehot = np.zeros((n, D))
    onehot[np.arange(n), ys] = 1.0
    if objective == "log_softmax":
        p = np.exp(log_softmax(logits))
        dlogits = onehot - p
    else:
        dlogits = onehot
    grad = _backprop_input(model, zs, acts, dlogits)
    return grad[0] if single else grad


def _parameter_gradients(model: MlpModel, X: np.ndarray, ys: np.ndarray):
    """Mean cross-entropy loss and its parameter gradients over a batch."""
    zs, acts = _forward_cached(model, X)
    logits = acts[-1]
    n, D = logits.shape
    ls = log_softmax(logits)
    loss = -float(np.mean(ls[np.arange(n), ys]))
    p = np.exp(ls)
    delta = p.copy()
    delta[np.arange(n), ys] -= 1.0
    delta /= n
    dWs = [None] * len(model.weights)
    dbs = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        dWs[i] = acts[i].T @ delta
        dbs[i] = delta.sum(axis=0)
        if i > 0:
            dx = delta @ model.weights[i].T
            delta = dx * _act_grad(zs[i - 1], acts[i], model.activation)
    return loss, dWs, dbs


@dataclass
class TrainResult:
    model: MlpModel
    losses: np.ndarray  # mean training loss per epoch


def train(
    model: MlpModel,
    points: np.ndarray,
    labels: np.ndarray,
    *,
    noise_mode: str = "clean",
    schedule: Schedule | None = None,
    epochs: int = 50,
    batch_size: int = 128,
    lr: float = 0.01,
    beta1: float = 0.9,
    beta2: float = 0.999,
    adam_eps: float = 1e-8,
    seed: int = 0,
) -> TrainResult:
    """Minibatch cross-entropy training with bias-corrected adaptive moments.

    noise_mode "clean" trains on the raw points. "forward_noised" replaces
    every batch point by its forward-noised version at an independently drawn
    step t ~ U{0..T} (t = 0 leaves the point clean), which is what makes the
    resulting classifier robust to diffusion noise. The noise draws come from
    their own seeded stream, so a clean run and a noised run share the same
    shuffling sequence.
    """
    if noise_mode not in ("clean", "forward_noised"):
        raise ValueError("noise_mode must be 'clean' or 'forward_noised'")
    if noise_mode == "forward_noised" and schedule is None:
        raise ValueError("forward_noised mode needs a schedule")
    X = np.asarray(points, dtype=np.float64)
    ys = np.asarray(labels, dtype=np.int64)
    if len(X) != len(ys):
        raise ValueError("points and labels disagree in length")
    if X.shape[1] != model.input_dim:
        raise ValueError("data dimension does not match the model")

    shuffle_rng, noise_rng = [
        np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2)
    ]
    weights = [w.copy() for w in model.weights]
    biases = [b.copy() for b in model.biases]
    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    step = 0
    losses = []
    if schedule is not None:
        # alpha_bar per drawn t, with t = 0 mapping to 1 (no noise)
        abar_table = np.concatenate([[1.0], schedule.alpha_bars])

    for _ in range(epochs):
        order = shuffle_rng.permutation(len(X))
        epoch_losses = []
        for start in range(0, len(X), batch_size):
            idx = order[start : start + batch_size]
            xb, yb = X[idx], ys[idx]
            if noise_mode == "forward_noised":
                t = noise_rng.integers(0, schedule.T + 1, size=len(idx))
                eps = noise_rng.standard_normal(xb.shape)
                ab = abar_table[t][:, None]
                xb = np.sqrt(ab) * xb + np.sqrt(1.0 - ab) * eps
            current = MlpModel(tuple(weights), tuple(biases), model.activation)
            loss, dWs, dbs = _parameter_gradients(current, xb, yb)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss {loss} at step {step}; lower the learning rate"
                )
            step += 1
            corr1 = 1.0 - beta1**step
            corr2 = 1.0 - beta2**step
            for i in range(len(weights)):
                m_w[i] = beta1 * m_w[i] + (1.0 - beta1) * dWs[i]
                v_w[i] = beta2 * v_w[i] + (1.0 - beta2) * dWs[i] ** 2
                weights[i] -= lr * (m_w[i] / corr1) / (np.sqrt(v_w[i] / corr2) + adam_eps)
                m_b[i] = beta1 * m_b[i] + (1.0 - beta1) * dbs[i]
                v_b[i] = beta2 * v_b[i] + (1.0 - beta2) * dbs[i] ** 2
                biases[i] -= lr * (m_b[i] / corr1) / (np.sqrt(v_b[i] / corr2) + adam_eps)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))

    trained = MlpModel(tuple(w.copy() for w in weights), tuple(b.copy() for b in biases), model.activation)
    for arr in trained.weights + trained.biases:
        arr.setflags(write=False)
    if not all(np.all(np.isfinite(w)) for w in trained.weights):
        raise TrainingDiverged("non-finite parameters after training")
    return TrainResult(trained, np.asarray(losses))


def save_checkpoint(model: MlpModel, path) -> None:
    """JSON checkpoint; floats written with 17 significant digits so the
    decimal form round-trips exactly."""
    doc = {
        "layer_sizes": model.layer_sizes,
        "activation": model.activation,
        "weights": [[format(v, ".17g") for v in w.ravel()] for w in model.weights],
        "biases": [[format(v, ".17g") for v in b] for b in model.biases],
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_checkpoint(path) -> MlpModel:
    with open(path) as f:
        doc = json.load(f)
    sizes = doc["layer_sizes"]
    weights, biases = [], []
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        w = np.array([float(v) for v in doc["weights"][i]]).reshape(fan_in, fan_out)
        b = np.array([float(v) for v in doc["biases"][i]])
        w.setflags(write=False)
        b.setflags(write=False)
        weights.append(w)
        biases.append(b)
    return MlpModel(tuple(weights), tuple(biases), doc["activation"])
