"""A small feedforward network written directly in numpy.

The network maps an observation vector to a single scalar action. Hidden
layers use ReLU activations followed by inverted dropout at training time;
the output layer is linear. Training minimizes the mean-square error with
Adam.

Weights are stored as ``(fan_in, fan_out)`` matrices so that a layer computes
``x @ W + b``.
"""
from dataclasses import dataclass, field
import struct

import numpy as np


class ShapeError(ValueError):
    """Raised when an input or parameter has the wrong dimensions."""


class ContractError(RuntimeError):
    """Raised when a cache does not belong to the parameters it is used with."""


class OptimizerFault(RuntimeError):
    """Raised when the optimizer receives non-finite gradients."""


class CheckpointError(ValueError):
    """Raised when a checkpoint cannot be parsed.

    Attributes
    ----------
    offset : int
        byte offset at which parsing failed
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class MlpParams:
    """Parameters of a multi-layer perceptron.

    Attributes
    ----------
    layer_sizes : tuple of int
        widths from input to output, e.g. ``(18, 32, 32, 32, 1)``
    weights : list of np.ndarray
        one ``(fan_in, fan_out)`` matrix per layer
    biases : list of np.ndarray
        one ``(fan_out,)`` vector per layer
    dropout_rate : float
        probability of zeroing a hidden activation at training time
    version : int
        incremented by every optimizer update; used to detect stale caches
    """

    layer_sizes: tuple
    weights: list
    biases: list
    dropout_rate: float = 0.1
    version: int = 0

    def __post_init__(self):
        self.layer_sizes = tuple(int(s) for s in self.layer_sizes)
        if len(self.weights) != len(self.layer_sizes) - 1 or \
                len(self.biases) != len(self.weights):
            raise ShapeError("one weight matrix and bias per layer expected")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            expected = (self.layer_sizes[i], self.layer_sizes[i + 1])
            if w.shape != expected or b.shape != (expected[1],):
                raise ShapeError(
                    f"layer {i}: expected weight {expected} and bias "
                    f"({expected[1]},), got {w.shape} and {b.shape}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @property
    def input_dim(self):
        return self.layer_sizes[0]

    def copy(self):
        return MlpParams(self.layer_sizes, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases], self.dropout_rate,
                         self.version)

    def flat(self):
        """Return every parameter concatenated into one vector."""
        return np.concatenate([np.concatenate([w.ravel(), b])
                               for w, b in zip(self.weights, self.biases)])


@dataclass
class Gradients:
    """Gradients laid out like the weights and biases of :class:`MlpParams`."""

    weights: list
    biases: list

    def flat(self):
        return np.concatenate([np.concatenate([w.ravel(), b])
                               for w, b in zip(self.weights, self.biases)])


def init_mlp(layer_sizes, rng, dropout_rate=0.1):
    """Initialize a network with Glorot-uniform weights and zero biases."""
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_sizes[:-1], layer_sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpParams(tuple(layer_sizes), weights, biases, dropout_rate)


def forward(p, x, train=False, rng=None):
    """Evaluate the network.

    Parameters
    ----------
    p : MlpParams
        network parameters
    x : array_like
        a single observation of shape ``(input_dim,)`` or a batch of shape
        ``(batch, input_dim)``
    train : bool
        whether to apply dropout to the hidden activations
    rng : np.random.Generator
        source of dropout masks, required when training with dropout

    Returns
    -------
    float or np.ndarray
        raw network output, one scalar per observation
    dict
        cache of activations consumed by :func:`backward`
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != p.input_dim:
        raise ShapeError(f"expected input of width {p.input_dim}, "
                         f"got shape {x.shape}")
    use_dropout = train and p.dropout_rate > 0
    if use_dropout and rng is None:
        raise ValueError("training-mode dropout needs an rng")

    acts = [xb]
    masks = []
    h = xb
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w + b
        if i == last:
            h = z
            break
        h = np.maximum(z, 0.0)
        if use_dropout:
            keep = rng.random(h.shape) >= p.dropout_rate
            mask = keep / (1.0 - p.dropout_rate)
            h = h * mask
        else:
            mask = None
        masks.append(mask)
        acts.append(h)

    out = h[:, 0]
    cache = {"acts": acts, "masks": masks, "out": out, "single": single,
             "version": p.version, "layer_sizes": p.layer_sizes}
    return (float(out[0]) if single else out), cache


def predict(p, x):
    """Evaluation-mode forward pass without the cache."""
    return forward(p, x)[0]


def backward(p, cache, target):
    """Return MSE gradients for the forward pass stored in ``cache``.

    The loss is the batch mean of ``(output - target)**2``; for a single
    observation it is the squared error itself.

    Raises
    ------
    ContractError
        if the cache was produced by other (or since-updated) parameters
    """
    if cache.get("version") != p.version or \
            cache.get("layer_sizes") != p.layer_sizes:
        raise ContractError("cache does not match these parameters")
    out = cache["out"]
    target = np.atleast_1d(np.asarray(target, dtype=float))
    if target.shape != out.shape:
        raise ShapeError(f"target shape {target.shape} != output shape "
                         f"{out.shape}")
    acts, masks = cache["acts"], cache["masks"]
    n = len(out)

    delta = (2.0 / n) * (out - target)[:, None]
    grads_w = [None] * len(p.weights)
    grads_b = [None] * len(p.weights)
    for i in range(len(p.weights) - 1, -1, -1):
        grads_w[i] = acts[i].T @ delta
        grads_b[i] = delta.sum(axis=0)
        if i == 0:
            break
        delta = delta @ p.weights[i].T
        if masks[i - 1] is not None:
            delta = delta * masks[i - 1]
        # acts[i] is post-ReLU (and post-mask); its sign gives the ReLU gate
        delta = delta * (acts[i] > 0)
    return Gradients(grads_w, grads_b)


def mse_loss(p, x, target):
    """Evaluation-mode mean-square error."""
    out = np.atleast_1d(predict(p, x))
    return float(np.mean((out - np.atleast_1d(target)) ** 2))


@dataclass
class AdamState:
    """Adam optimizer state.

    Attributes
    ----------
    lr, beta1, beta2, eps : float
        optimizer hyperparameters
    m, v : list of np.ndarray
        first and second moment estimates, flattened per layer as
        ``concat(W.ravel(), b)``
    step_count : int
        number of updates performed
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step_count: int = 0


def init_adam(p, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Return a fresh optimizer state shaped like ``p``."""
    m = [np.zeros(w.size + b.size) for w, b in zip(p.weights, p.biases)]
    v = [np.zeros_like(x) for x in m]
    return AdamState(lr, beta1, beta2, eps, m, v, 0)


def adam_step(p, opt, grads):
    """Apply one bias-corrected Adam update.

    Returns new parameter and optimizer objects; the inputs are left intact.

    Raises
    ------
    OptimizerFault
        if any gradient is NaN or infinite
    """
    if len(grads.weights) != len(p.weights) or len(opt.m) != len(p.weights):
        raise ShapeError("gradients, optimizer and parameters disagree")
    t = opt.step_count + 1
    bc1 = 1.0 - opt.beta1 ** t
    bc2 = 1.0 - opt.beta2 ** t
    new_w, new_b, new_m, new_v = [], [], [], []
    for w, b, gw, gb, m, v in zip(p.weights, p.biases, grads.weights,
                                  grads.biases, opt.m, opt.v):
        if gw.shape != w.shape or gb.shape != b.shape:
            raise ShapeError("gradient shape does not match parameter shape")
        g = np.concatenate([gw.ravel(), gb])
        if not np.all(np.isfinite(g)):
            raise OptimizerFault(f"non-finite gradient at update {t}")
        m = opt.beta1 * m + (1.0 - opt.beta1) * g
        v = opt.beta2 * v + (1.0 - opt.beta2) * g * g
        update = opt.lr * (m / bc1) / (np.sqrt(v / bc2) + opt.eps)
        flat = np.concatenate([w.ravel(), b]) - update
        new_w.append(flat[:w.size].reshape(w.shape))
        new_b.append(flat[w.size:])
        new_m.append(m)
        new_v.append(v)
    new_p = MlpParams(p.layer_sizes, new_w, new_b, p.dropout_rate,
                      p.version + 1)
    return new_p, AdamState(opt.lr, opt.beta1, opt.beta2, opt.eps, new_m,
                            new_v, t)


class Dataset:
    """Append-only store of ``(observation, expert action)`` pairs."""

    def __init__(self, input_dim):
        self.input_dim = int(input_dim)
        self._obs = [np.zeros((0, self.input_dim))]
        self._act = [np.zeros(0)]
        self._cat = None

    def __len__(self):
        return sum(len(a) for a in self._act)

    def append(self, obs, actions):
        """Append a batch of observations and their expert actions."""
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        actions = np.atleast_1d(np.asarray(actions, dtype=float))
        if obs.shape[1] != self.input_dim or len(obs) != len(actions):
            raise ShapeError(f"expected ({len(actions)}, {self.input_dim}) "
                             f"observations, got {obs.shape}")
        if not (np.all(np.isfinite(obs)) and np.all(np.isfinite(actions))):
            raise ValueError("dataset values must be finite")
        self._obs.append(obs.copy())
        self._act.append(actions.copy())
        self._cat = None

    def extend(self, other):
        self.append(other.X, other.y)

    def _concat(self):
        if self._cat is None:
            self._cat = (np.concatenate(self._obs), np.concatenate(self._act))
            self._obs, self._act = [self._cat[0]], [self._cat[1]]
        return self._cat

    @property
    def X(self):
        return self._concat()[0]

    @property
    def y(self):
        return self._concat()[1]

    def subsample(self, budget, rng):
        """Return a uniformly random subset of at most ``budget`` samples.

        Original ordering is preserved; all samples are kept when the budget
        exceeds the dataset size.
        """
        n = len(self)
        out = Dataset(self.input_dim)
        if n == 0:
            return out
        if budget >= n:
            out.append(self.X, self.y)
            return out
        keep = np.sort(rng.choice(n, size=int(budget), replace=False))
        out.append(self.X[keep], self.y[keep])
        return out

    def to_csv(self, path):
        """Write the dataset with one column per observation entry plus the
        action label."""
        header = ",".join([f"obs_{i}" for i in range(self.input_dim)]
                          + ["action"])
        table = np.column_stack([self.X, self.y])
        np.savetxt(path, table, delimiter=",", header=header, comments="",
                   fmt="%.17g")

    @classmethod
    def from_csv(cls, path):
        with open(path) as f:
            header = f.readline().strip().split(",")
        if not header or header[-1] != "action":
            raise ValueError(f"{path}: missing 'action' column")
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        data = cls(len(header) - 1)
        if len(table):
            data.append(table[:, :-1], table[:, -1])
        return data


def train_epoch(p, opt, data, batch_size=128, rng=None):
    """Run one shuffled pass over ``data``.

    The last batch may be smaller than ``batch_size``.

    Returns
    -------
    MlpParams, AdamState, float
        updated parameters, optimizer state and the mean per-sample squared
        error of the training-mode predictions over the epoch
    """
    n = len(data)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if rng is None:
        raise ValueError("train_epoch needs an rng")
    X, y = data.X, data.y
    order = rng.permutation(n)
    total = 0.0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        out, cache = forward(p, X[idx], train=True, rng=rng)
        total += float(np.sum((out - y[idx]) ** 2))
        grads = backward(p, cache, y[idx])
        p, opt = adam_step(p, opt, grads)
    return p, opt, total / n


_MAGIC = b"MLPCKPT\x00"
_VERSION = 1


def save_checkpoint(p, path):
    """Write parameters to ``path``.

    Layout (all little-endian):

    ======  ===========================================================
    bytes   content
    ======  ===========================================================
    8       magic ``b"MLPCKPT\\0"``
    4       uint32 format version (1)
    4       uint32 number of layer sizes L
    4 * L   uint32 layer sizes, input first
    8       float64 dropout rate
    rest    per layer: weight matrix ``(fan_in, fan_out)`` in row-major
            order, then the bias vector, all float64
    ======  ===========================================================
    """
    parts = [_MAGIC, struct.pack("<II", _VERSION, len(p.layer_sizes)),
             struct.pack(f"<{len(p.layer_sizes)}I", *p.layer_sizes),
             struct.pack("<d", p.dropout_rate)]
    for w, b in zip(p.weights, p.biases):
        parts.append(np.ascontiguousarray(w, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(b"".join(parts))


def load_checkpoint(path, layer_sizes=None):
    """Read parameters written by :func:`save_checkpoint`.

    Parameters
    ----------
    layer_sizes : tuple of int, optional
        expected architecture; a mismatch raises :class:`ShapeError`

    Raises
    ------
    CheckpointError
        if the file is truncated or malformed
    """
    with open(path, "rb") as f:
        buf = f.read()
    offset = 0

    def take(n):
        nonlocal offset
        if offset + n > len(buf):
            raise CheckpointError(
                f"truncated checkpoint: needed {n} bytes, "
                f"{len(buf) - offset} left", offset)
        chunk = buf[offset:offset + n]
        offset += n
        return chunk

    if take(8) != _MAGIC:
        raise CheckpointError("bad magic number", 0)
    version, n_sizes = struct.unpack("<II", take(8))
    if version != _VERSION:
        raise CheckpointError(f"unsupported version {version}", 8)
    if not 2 <= n_sizes <= 64:
        raise CheckpointError(f"implausible layer count {n_sizes}", 12)
    sizes = struct.unpack(f"<{n_sizes}I", take(4 * n_sizes))
    (dropout,) = struct.unpack("<d", take(8))
    if layer_sizes is not None and tuple(layer_sizes) != tuple(sizes):
        raise ShapeError(f"checkpoint has layers {sizes}, expected "
                         f"{tuple(layer_sizes)}")
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(take(8 * fan_in * fan_out), dtype="<f8")
        weights.append(w.reshape(fan_in, fan_out).astype(float))
        biases.append(np.frombuffer(take(8 * fan_out), dtype="<f8")
                      .astype(float))
    if offset != len(buf):
        raise CheckpointError(f"{len(buf) - offset} trailing bytes", offset)
    return MlpParams(sizes, weights, biases, dropout)
