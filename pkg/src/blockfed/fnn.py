"""Feed-forward network numerics for the FL payload: initialization, forward
pass, softmax cross-entropy backpropagation, SGD local updates, FedAvg
aggregation, and evaluation.

Everything is plain numpy in float64 and pure given (inputs, rng state), so
runs are bit-reproducible. The default architecture is the 784-200-200-10
classifier (ReLU hidden layers, softmax output), but any layer list with at
least one hidden layer works; tests use tiny nets.
"""

from dataclasses import dataclass

import numpy as np


class ModelWeights:
    """Per-layer weight matrices (fan_in x fan_out) and bias vectors."""

    __slots__ = ("weights", "biases")

    def __init__(self, weights: list[np.ndarray], biases: list[np.ndarray]):
        self.weights = weights
        self.biases = biases

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def copy(self) -> "ModelWeights":
        return ModelWeights([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def astype(self, dtype) -> "ModelWeights":
        return ModelWeights(
            [np.asarray(w, dtype=dtype) for w in self.weights],
            [np.asarray(b, dtype=dtype) for b in self.biases],
        )

    def all_finite(self) -> bool:
        return all(np.isfinite(w).all() for w in self.weights) and all(
            np.isfinite(b).all() for b in self.biases
        )


def init_model(layer_sizes: list[int], rng: np.random.Generator) -> ModelWeights:
    """Scaled-uniform init: |w| < sqrt(6 / (fan_in + fan_out)), biases zero."""
    if len(layer_sizes) < 2:
        raise ValueError("need at least an input and an output layer")
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return ModelWeights(weights, biases)


def _forward_cached(model: ModelWeights, x: np.ndarray):
    """Returns (activations, pre-activations); activations[-1] are log-probs."""
    if x.ndim != 2 or x.shape[1] != model.weights[0].shape[0]:
        raise ValueError(
            f"input shape {x.shape} does not match model input dim "
            f"{model.weights[0].shape[0]}"
        )
    acts = [x]
    zs = []
    a = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = a @ w + b
        zs.append(z)
        if i < last:
            a = np.maximum(z, 0.0)
        else:
            # log-softmax, kept in log space for a numerically exact loss
            z_shift = z - z.max(axis=1, keepdims=True)
            a = z_shift - np.log(np.exp(z_shift).sum(axis=1, keepdims=True))
        acts.append(a)
    return acts, zs


def forward(model: ModelWeights, x: np.ndarray) -> np.ndarray:
    """Class-probability matrix; each row sums to 1."""
    acts, _ = _forward_cached(model, x)
    return np.exp(acts[-1])


def loss_and_grads(model: ModelWeights, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy over the batch and its gradients.

    Gradient shapes mirror the model. Duplicating the batch leaves both the
    loss and the gradients unchanged (everything is a per-sample mean).
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("batch must be nonempty")
    acts, zs = _forward_cached(model, x)
    log_probs = acts[-1]
    loss = float(-log_probs[np.arange(n), y].mean())

    probs = np.exp(log_probs)
    delta = probs
    delta[np.arange(n), y] -= 1.0
    delta /= n

    grad_w = [None] * len(model.weights)
    grad_b = [None] * len(model.biases)
    for i in range(len(model.weights) - 1, -1, -1):
        grad_w[i] = acts[i].T @ delta
        grad_b[i] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ model.weights[i].T) * (zs[i - 1] > 0.0)
    return loss, ModelWeights(grad_w, grad_b)


def local_update(
    model: ModelWeights,
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
    epochs: int,
    batch_size: int,
    learning_rate: float,
) -> tuple[ModelWeights, float]:
    """Epochs of mini-batch SGD on one client's shard.

    Each epoch reshuffles the shard (seeded) and steps once per batch; the
    last batch may be smaller. Returns the updated weights and the mean batch
    loss of the final epoch.
    """
    if epochs < 1 or batch_size < 1 or learning_rate < 0:
        raise ValueError("epochs, batch_size must be >= 1 and learning_rate >= 0")
    n = x.shape[0]
    if n == 0:
        raise ValueError("shard must be nonempty")
    w = model.copy()
    epoch_loss = 0.0
    for _ in range(epochs):
        perm = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = perm[start : start + batch_size]
            loss, grads = loss_and_grads(w, x[idx], y[idx])
            losses.append(loss)
            for wi, gw in zip(w.weights, grads.weights):
                wi -= learning_rate * gw
            for bi, gb in zip(w.biases, grads.biases):
                bi -= learning_rate * gb
        epoch_loss = float(np.mean(losses))
    return w, epoch_loss


def fedavg(updates: list[tuple[ModelWeights, float]]) -> ModelWeights:
    """Element-wise convex combination of weight sets.

    The mixing coefficients must sum to 1 (within 1e-9) and all shapes must
    agree; violations are programming errors and raise.
    """
    if not updates:
        raise ValueError("fedavg needs at least one update")
    total = sum(alpha for _, alpha in updates)
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"aggregation weights must sum to 1, got {total}")
    ref = updates[0][0]
    shapes = [w.shape for w in ref.weights]
    out_w = [np.zeros(s) for s in shapes]
    out_b = [np.zeros(b.shape) for b in ref.biases]
    for model, alpha in updates:
        if [w.shape for w in model.weights] != shapes:
            raise ValueError("mismatched weight shapes in aggregation")
        for acc, w in zip(out_w, model.weights):
            acc += alpha * np.asarray(w, dtype=np.float64)
        for acc, b in zip(out_b, model.biases):
            acc += alpha * np.asarray(b, dtype=np.float64)
    return ModelWeights(out_w, out_b)


def evaluate(
    model: ModelWeights, x: np.ndarray, y: np.ndarray, batch: int = 2048
) -> tuple[float, float]:
    """(accuracy, mean cross-entropy loss) over a dataset.

    Predicted class is the argmax of the output row; argmax ties resolve to
    the lowest class index.
    """
    n = x.shape[0]
    if n == 0:
        raise ValueError("dataset must be nonempty")
    correct = 0
    loss_sum = 0.0
    for start in range(0, n, batch):
        xb = x[start : start + batch]
        yb = y[start : start + batch]
        acts, _ = _forward_cached(model, xb)
        log_probs = acts[-1]
        correct += int((log_probs.argmax(axis=1) == yb).sum())
        loss_sum += float(-log_probs[np.arange(xb.shape[0]), yb].sum())
    return correct / n, loss_sum / n


@dataclass(frozen=True)
class ComputeProfile:
    """Device speed model: MIPS rating and instructions per local update."""

    mips: float
    work_per_update: float

    def __post_init__(self):
        if self.mips <= 0 or self.work_per_update <= 0:
            raise ValueError("mips and work_per_update must be positive")

    @property
    def mean_seconds(self) -> float:
        return self.work_per_update / (self.mips * 1e6)


def sample_compute_time(profile: ComputeProfile, rng: np.random.Generator) -> float:
    """Exponential local-update duration with mean work / (MIPS * 1e6)."""
    return float(rng.exponential(profile.mean_seconds))
