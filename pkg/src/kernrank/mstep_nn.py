"""Kernel refit under a neural-network prior.

f(x, y) = g(x, y) - g(y, x) with g a ReLU multilayer perceptron. Training
pairs are drawn from the E-step grid Q and the network minimizes the mean
of -log sigmoid(f(x_s, y_s)) plus |theta|^2 / (total match count) with Adam.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .chebkit import ChebGrid
from .model import Kernel

log = logging.getLogger(__name__)

HIDDEN = (64, 64)
MAX_SAMPLES = 1_000_000


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(eq=False)
class MLP:
    """Fully connected ReLU network R^2 -> R."""

    weights: list
    biases: list
    seed: int = 0

    @classmethod
    def init(cls, hidden=HIDDEN, seed: int = 0, dtype=np.float64) -> "MLP":
        """Uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
        rng = np.random.default_rng(seed)
        sizes = (2, *hidden, 1)
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
        return cls(weights, biases, seed)

    @property
    def dtype(self):
        return self.weights[0].dtype

    def astype(self, dtype) -> "MLP":
        return MLP([w.astype(dtype) for w in self.weights], [b.astype(dtype) for b in self.biases], self.seed)

    @property
    def widths(self) -> tuple:
        return (self.weights[0].shape[0], *(b.size for b in self.biases))

    def params(self) -> list:
        return [p for pair in zip(self.weights, self.biases) for p in pair]

    def flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def with_flat(self, vec) -> "MLP":
        vec = np.asarray(vec, dtype=self.dtype)
        out, pos = [], 0
        for p in self.params():
            out.append(vec[pos : pos + p.size].reshape(p.shape).copy())
            pos += p.size
        if pos != vec.size:
            raise ValueError(f"expected {pos} parameters, got {vec.size}")
        return MLP(out[0::2], out[1::2], self.seed)

    def copy(self) -> "MLP":
        return self.with_flat(self.flat())

    def sq_norm(self) -> float:
        return float(sum(np.sum(np.square(p, dtype=np.float64)) for p in self.params()))

    def g(self, z: np.ndarray, cache: list | None = None) -> np.ndarray:
        """Raw network output for an (N, 2) input."""
        h = z
        last = len(self.weights) - 1
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if cache is not None:
                cache.append(h)
            h = h @ W + b
            if k < last:
                h = np.maximum(h, 0.0)
        return h[:, 0]


def nn_forward(mlp: MLP, x, y):
    """Antisymmetrized log-odds f(x, y) = g(x, y) - g(y, x)."""
    x, y = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(y, dtype=float))
    shape = x.shape
    x, y = x.ravel(), y.ravel()
    # Each unordered pair is evaluated once in (low, high) order, so swapping
    # the arguments negates f bit for bit whatever the BLAS rounding.
    lo, hi = np.minimum(x, y), np.maximum(x, y)
    n = len(x)
    out = mlp.g(np.concatenate([np.stack([lo, hi], axis=1), np.stack([hi, lo], axis=1)]))
    d = out[:n] - out[n:]
    f = np.where(x < y, d, -d)
    f[x == y] = 0.0
    return float(f[0]) if shape == () else f.reshape(shape)


def loss_and_grad(mlp: MLP, pairs: np.ndarray, total_matches: float):
    """Mean negative log-likelihood of the pairs plus the weight penalty, and its gradient."""
    B = len(pairs)
    pairs = np.asarray(pairs, dtype=mlp.dtype)
    z = np.concatenate([pairs, pairs[:, ::-1]])
    cache = []
    out = mlp.g(z, cache)
    f = out[:B] - out[B:]
    nll = float(np.mean(np.logaddexp(0.0, -f)))
    reg = mlp.sq_norm() / total_matches
    dout = np.empty(2 * B, dtype=mlp.dtype)
    d = -0.5 * (1.0 - np.tanh(0.5 * f)) / B  # d/df of mean softplus(-f) = -sigmoid(-f)/B
    dout[:B], dout[B:] = d, -d

    grads_w, grads_b = [], []
    delta = dout[:, None]
    for k in range(len(mlp.weights) - 1, -1, -1):
        h_in = cache[k]
        grads_w.append(h_in.T @ delta + 2.0 * mlp.weights[k] / total_matches)
        grads_b.append(delta.sum(axis=0) + 2.0 * mlp.biases[k] / total_matches)
        if k > 0:
            delta = (delta @ mlp.weights[k].T) * (h_in > 0)
    grads_w.reverse()
    grads_b.reverse()
    grads = [gp for pair in zip(grads_w, grads_b) for gp in pair]
    return nll + reg, grads


@dataclass(frozen=True)
class TrainOptions:
    samples: int | None = None  # None: 50 per observed match, capped at MAX_SAMPLES
    epochs: int = 20
    batch_size: int = 256
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    hidden: tuple = HIDDEN
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if self.samples is not None and self.samples < 1:
            raise ValueError("need at least one training sample")
        if not self.lr > 0:
            raise ValueError("step size must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")

    def with_seed(self, seed: int) -> "TrainOptions":
        return dataclasses.replace(self, seed=int(seed))

    def sample_count(self, total_matches: float) -> int:
        if self.samples is not None:
            return self.samples
        return int(min(MAX_SAMPLES, max(1, round(50 * total_matches))))


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def sample_pairs(q, count: int, seed: int) -> np.ndarray:
    """Draw (x, y) pairs with density proportional to Q: a categorical draw over
    grid cells weighted by quadrature mass, then uniform jitter inside the cell."""
    values = np.asarray(getattr(q, "values", q), dtype=float)
    grid: ChebGrid = q.grid
    mass = np.clip(values, 0.0, None) * np.outer(grid.quad_weights, grid.quad_weights)
    total = mass.sum()
    if not total > 0:
        raise ValueError("cannot sample from a grid with zero mass")
    rng = np.random.default_rng(seed)
    cells = rng.choice(mass.size, size=count, p=(mass / total).ravel())
    k, m = np.divmod(cells, grid.L)
    edges = grid.cell_edges
    u = rng.random((count, 2))
    x = edges[k] + u[:, 0] * (edges[k + 1] - edges[k])
    y = edges[m] + u[:, 1] * (edges[m + 1] - edges[m])
    return np.stack([x, y], axis=1)


@dataclass
class NNFitResult:
    kernel: Kernel
    mlp: MLP
    epoch_losses: list = field(default_factory=list)


def kernel_from_mlp(mlp: MLP, grid: ChebGrid) -> Kernel:
    X, Y = np.meshgrid(grid.nodes, grid.nodes, indexing="ij")
    return Kernel(nn_forward(mlp.astype(np.float64), X, Y), grid)


def train_kernel(q, opts: TrainOptions, grid: ChebGrid, init: MLP | None = None) -> NNFitResult:
    total = float(q.total_weight)
    if not total > 0:
        raise ValueError("training needs at least one observed match")
    dtype = np.dtype(opts.dtype)
    mlp = init.astype(dtype) if init is not None else MLP.init(opts.hidden, opts.seed, dtype)
    pairs = sample_pairs(q, opts.sample_count(total), opts.seed)
    rng = np.random.default_rng(opts.seed + 1)
    params = mlp.params()
    adam = Adam(params, opts.lr, opts.beta1, opts.beta2, opts.eps)
    epoch_losses = []
    for epoch in range(opts.epochs):
        order = rng.permutation(len(pairs))
        running, batches = 0.0, 0
        for start in range(0, len(pairs), opts.batch_size):
            batch = pairs[order[start : start + opts.batch_size]]
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads = loss_and_grad(mlp, batch, total)
            if not np.isfinite(loss):
                with np.errstate(over="ignore"):
                    norm = mlp.sq_norm()
                raise TrainingDivergedError(f"loss became {loss} in epoch {epoch} (|theta|^2 = {norm:.3g})")
            adam.step(params, grads)
            running += loss
            batches += 1
        epoch_losses.append(running / batches)
        log.debug("epoch %d: mean loss %.6f", epoch, epoch_losses[-1])
    return NNFitResult(kernel_from_mlp(mlp, grid), mlp, epoch_losses)


def fit_kernel_nn(q, opts: TrainOptions, grid: ChebGrid) -> Kernel:
    return train_kernel(q, opts, grid).kernel


def save_mlp(path, mlp: MLP) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# mlp widths={','.join(map(str, mlp.widths))} seed={mlp.seed}\n")
        for v in mlp.flat():
            fh.write(f"{float(v)!r}\n")


def load_mlp(path) -> MLP:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().split()
        if len(header) < 3 or header[1] != "mlp" or not header[2].startswith("widths="):
            raise ValueError(f"{path}: not an MLP parameter file")
        widths = tuple(int(v) for v in header[2][len("widths=") :].split(","))
        seed = int(header[3][len("seed=") :]) if len(header) > 3 else 0
        vec = np.array([float(line) for line in fh if line.strip()])
    if widths[0] != 2 or widths[-1] != 1:
        raise ValueError(f"{path}: expected a 2 -> ... -> 1 network, got widths {widths}")
    return MLP.init(widths[1:-1], seed).with_flat(vec.astype(np.float64))
