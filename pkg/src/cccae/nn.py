"""Small dense-network toolkit in float64 numpy.

Layers compute ``act(A @ W.T + b)`` on row-major batches. Training is plain
minibatch Adam driven by a caller-supplied loss/gradient closure, so the
same loop serves the autoencoders, the CCA-constrained objective and the
regressor.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericalError

logger = logging.getLogger(__name__)

ACTIVATIONS = ("tanh", "relu", "linear")


def _act(name, z):
    if name == "tanh":
        return np.tanh(z)
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _act_grad(name, z, a):
    if name == "tanh":
        return 1.0 - a * a
    if name == "relu":
        return (z > 0).astype(z.dtype)
    return np.ones_like(z)


@dataclass
class DenseLayer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = "linear"

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64).ravel()
        if self.activation not in ACTIVATIONS:
            raise DataError(f"unknown activation {self.activation!r}")
        if self.W.ndim != 2 or self.b.shape != (self.W.shape[0],):
            raise DataError(f"inconsistent layer shapes W{self.W.shape} b{self.b.shape}")

    @property
    def n_in(self):
        return self.W.shape[1]

    @property
    def n_out(self):
        return self.W.shape[0]

    @classmethod
    def init(cls, n_in, n_out, activation, rng):
        """Glorot-uniform weights, zero bias."""
        limit = np.sqrt(6.0 / (n_in + n_out))
        return cls(rng.uniform(-limit, limit, size=(n_out, n_in)), np.zeros(n_out), activation)


class Mlp:
    def __init__(self, layers):
        self.layers = list(layers)
        for a, b in zip(self.layers, self.layers[1:]):
            if a.n_out != b.n_in:
                raise DataError(f"layer widths do not chain: {a.n_out} -> {b.n_in}")

    @classmethod
    def build(cls, widths, activations, rng=None, seed=0):
        if len(activations) != len(widths) - 1:
            raise DataError("need one activation per layer")
        rng = rng if rng is not None else np.random.default_rng(seed)
        return cls([DenseLayer.init(i, o, a, rng) for i, o, a in zip(widths, widths[1:], activations)])

    @property
    def widths(self):
        return [self.layers[0].n_in] + [l.n_out for l in self.layers]

    @property
    def activations(self):
        return [l.activation for l in self.layers]

    @property
    def n_in(self):
        return self.layers[0].n_in

    @property
    def n_out(self):
        return self.layers[-1].n_out

    def params(self):
        out = []
        for l in self.layers:
            out += [l.W, l.b]
        return out

    def copy(self):
        return copy.deepcopy(self)

    def __len__(self):
        return len(self.layers)

    def __getitem__(self, sl):
        if isinstance(sl, slice):
            return Mlp(self.layers[sl])
        return self.layers[sl]

    def __call__(self, X):
        return forward(self, X)[1]

    def __repr__(self):
        return f"Mlp({'-'.join(map(str, self.widths))}, {','.join(self.activations)})"


def forward(mlp: Mlp, batch):
    """Returns ``(cache, output)``; cache holds the input and each layer's (z, a)."""
    A = np.asarray(batch, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != mlp.n_in:
        raise DataError(f"batch of shape {A.shape} does not fit input width {mlp.n_in}")
    cache = [(None, A)]
    for layer in mlp.layers:
        Z = A @ layer.W.T + layer.b
        A = _act(layer.activation, Z)
        cache.append((Z, A))
    return cache, A


def backward(mlp: Mlp, cache, grad_out):
    """Backpropagate dL/d(output). Returns (grads aligned with ``params()``, dL/d(input))."""
    grads = []
    G = grad_out
    for i in range(len(mlp.layers) - 1, -1, -1):
        layer = mlp.layers[i]
        Z, A = cache[i + 1]
        dZ = G * _act_grad(layer.activation, Z, A)
        A_prev = cache[i][1]
        grads = [dZ.T @ A_prev, dZ.sum(axis=0)] + grads
        G = dZ @ layer.W
    return grads, G


def mse(output, targets):
    """Mean over rows of the squared error summed over columns, and its gradient."""
    diff = output - targets
    n = output.shape[0]
    return float(np.sum(diff * diff) / n), (2.0 / n) * diff


def backward_mse(mlp: Mlp, batch, targets):
    targets = np.asarray(targets, dtype=np.float64)
    cache, out = forward(mlp, batch)
    if targets.shape != out.shape:
        raise DataError(f"targets {targets.shape} do not match output {out.shape}")
    loss, g = mse(out, targets)
    grads, _ = backward(mlp, cache, g)
    return loss, grads


# --------------------------------------------------------------------------
# optimisation

@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_params(cls, params, **kw):
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **kw)


def adam_step(state: AdamState, params, grads):
    """In-place bias-corrected Adam update of ``params``; returns them."""
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    state.step += 1
    c1 = 1.0 - state.beta1**state.step
    c2 = 1.0 - state.beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise DataError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class TrainConfig:
    batch_size: int = 256
    epochs: int = 50
    seed: int = 0
    patience: int = 10
    val_fraction: float = 0.1
    lr: float = 2e-4

    def __post_init__(self):
        if self.batch_size < 1:
            raise DataError("batch_size must be >= 1")
        if self.epochs < 0:
            raise DataError("epochs must be >= 0")


def _snapshot(params):
    return [p.copy() for p in params]


def _restore(params, snap):
    for p, s in zip(params, snap):
        p[...] = s


def train(params, n_samples, loss_grad, cfg: TrainConfig, val_loss=None, full_loss=None,
          on_epoch=None):
    """Minibatch Adam over sample indices ``0..n_samples-1``.

    ``loss_grad(idx) -> (loss, grads)`` evaluates one minibatch. With
    ``val_loss`` early stopping keeps the best parameters seen. Returns the
    history dict ``{"initial", "train", "val", "best_epoch"}``.
    """
    rng = np.random.default_rng(cfg.seed)
    state = AdamState.for_params(params, lr=cfg.lr)
    hist = {"initial": full_loss() if full_loss else None, "train": [], "val": [], "best_epoch": 0}
    best = np.inf
    best_params = None
    stale = 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_samples)
        total = 0.0
        for start in range(0, n_samples, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_grad(idx)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            adam_step(state, params, grads)
            total += loss * idx.size
        hist["train"].append(total / n_samples)
        stop = False
        if val_loss is not None:
            v = val_loss()
            hist["val"].append(v)
            if v < best:
                best, best_params, stale = v, _snapshot(params), 0
                hist["best_epoch"] = epoch
            else:
                stale += 1
                stop = bool(cfg.patience) and stale >= cfg.patience
        if on_epoch is not None:
            on_epoch(epoch, hist)
        if stop:
            logger.info("early stop at epoch %d (best %d)", epoch, hist["best_epoch"])
            break
    if best_params is not None:
        _restore(params, best_params)
    return hist


def split_indices(n, val_fraction, seed):
    """Seeded train/validation index split."""
    if val_fraction <= 0 or n < 2:
        return np.arange(n), None
    order = np.random.default_rng(seed + 7919).permutation(n)
    n_val = max(1, int(round(n * val_fraction)))
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def fit_mse(mlp: Mlp, X, Y, cfg: TrainConfig, X_val=None, Y_val=None):
    """Train ``mlp`` in place to map X onto Y under mean squared error."""
    X = np.asarray(X, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise DataError("input/target row counts differ")
    if X_val is None and cfg.val_fraction > 0:
        tr, va = split_indices(X.shape[0], cfg.val_fraction, cfg.seed)
        if va is not None:
            X, Y, X_val, Y_val = X[tr], Y[tr], X[va], Y[va]
    params = mlp.params()

    def loss_grad(idx):
        return backward_mse(mlp, X[idx], Y[idx])

    val = None
    if X_val is not None:
        def val():
            return mse(mlp(X_val), Y_val)[0]

    return train(params, X.shape[0], loss_grad, cfg, val_loss=val,
                 full_loss=lambda: mse(mlp(X), Y)[0])


def layerwise_pretrain(mlp: Mlp, data, cfg: TrainConfig, return_history=False):
    """Greedy layer-by-layer autoencoder pretraining.

    For a mirrored stack (widths symmetric around the bottleneck) layer i is
    trained together with its mirror layer as a shallow autoencoder of the
    codes below it. Any other stack gets a throwaway linear decoder per layer.
    Returns a new Mlp; the input is left untouched.
    """
    out = mlp.copy()
    histories = []
    if cfg.epochs == 0:
        return (out, histories) if return_history else out
    widths = out.widths
    n = len(out.layers)
    mirrored = n % 2 == 0 and widths == widths[::-1]
    n_stages = n // 2 if mirrored else n
    codes = np.asarray(data, dtype=np.float64)
    for i in range(n_stages):
        enc = out.layers[i]
        stage_cfg = TrainConfig(**{**cfg.__dict__, "seed": cfg.seed + i})
        if mirrored:
            dec = out.layers[n - 1 - i]
        else:
            dec = DenseLayer.init(enc.n_out, enc.n_in, "linear", np.random.default_rng(stage_cfg.seed))
        histories.append(fit_mse(Mlp([enc, dec]), codes, codes, stage_cfg))
        codes = Mlp([enc])(codes)
    return (out, histories) if return_history else out


def gradient_check(loss_fn, params, h=1e-5, max_coords=500, seed=0, floor=1e-6):
    """Worst relative error between analytic and central-difference gradients.

    ``loss_fn()`` must return ``(loss, grads)`` for the current contents of
    ``params`` (which are perturbed in place and restored). At most
    ``max_coords`` coordinates are sampled.
    """
    _, grads = loss_fn()
    grads = [np.array(g, dtype=np.float64) for g in grads]
    sizes = [p.size for p in params]
    total = sum(sizes)
    rng = np.random.default_rng(seed)
    flat_ids = np.arange(total) if total <= max_coords else rng.choice(total, max_coords, replace=False)
    offsets = np.cumsum([0] + sizes)
    worst = 0.0
    for fid in np.sort(flat_ids):
        j = int(np.searchsorted(offsets, fid, side="right") - 1)
        p = params[j].reshape(-1)
        i = fid - offsets[j]
        orig = p[i]
        p[i] = orig + h
        fp = loss_fn()[0]
        p[i] = orig - h
        fm = loss_fn()[0]
        p[i] = orig
        num = (fp - fm) / (2 * h)
        ana = grads[j].reshape(-1)[i]
        err = abs(num - ana) / max(abs(num), abs(ana), floor)
        worst = max(worst, err)
    return worst
