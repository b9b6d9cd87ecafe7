"""The three trainable stages.

A. ``CccaeModel``: autoencoder over normalised waveform frames whose
   bottleneck is pushed towards high canonical correlation with head motion.
B. ``RegressorModel``: feed-forward map from a +-25 frame feature context to
   one rotation vector.
C. ``PostFilterModel``: autoencoder over 50-frame (500 ms) motion windows,
   applied with hop-1 overlap averaging.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio import FeatureMatrix, NormStats, variance_normalize
from .cca import TRAIN_REG, CcaConfig, cca_loss_grad, total_correlation
from .errors import DataError
from .headmotion import HeadMotionSequence
from .nn import (Mlp, TrainConfig, backward, fit_mse, forward, layerwise_pretrain, mse,
                 split_indices, train)

logger = logging.getLogger(__name__)

EMBED_DIM = 30
CONTEXT = 25
POSTFILTER_WINDOW = 50
MASK_ENERGY_PERCENTILE = 30.0


def align_lengths(*lengths, tolerance=5):
    """Common length of frame-aligned streams; warns past ``tolerance`` frames."""
    n = min(lengths)
    if max(lengths) - n > tolerance:
        logger.warning("stream lengths %s differ by more than %d frames; truncating to %d",
                       lengths, tolerance, n)
    return n


def _mask_or_all(mask, n):
    if mask is None:
        return np.ones(n, dtype=bool)
    mask = np.asarray(mask, dtype=bool).ravel()
    if mask.size != n:
        raise DataError(f"mask has {mask.size} entries for {n} frames")
    return mask


# --------------------------------------------------------------------------
# A. CCCAE

@dataclass
class CccaeModel:
    encoder: Mlp
    decoder: Mlp
    alpha: float
    norm_stats: NormStats
    history: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.alpha < 0:
            raise DataError("alpha must be >= 0")
        if self.encoder.n_out != self.decoder.n_in or self.encoder.n_in != self.decoder.n_out:
            raise DataError("encoder and decoder widths do not mirror")

    @property
    def embed_dim(self):
        return self.encoder.n_out


def cccae_objective(encoder: Mlp, decoder: Mlp, X, Y, alpha, reg=TRAIN_REG, with_grad=True):
    """Reconstruction MSE minus ``alpha`` times the total canonical correlation.

    Returns ``(objective, recon, corr, grads)`` with grads ordered as
    ``encoder.params() + decoder.params()`` (None when ``with_grad`` is off).
    """
    enc_cache, H = forward(encoder, X)
    dec_cache, out = forward(decoder, H)
    recon, g_out = mse(out, X)
    # per-element mean so the CCA term (at most k) is not swamped by the frame width
    recon /= X.shape[1]
    g_out /= X.shape[1]
    cfg = CcaConfig(reg=reg)
    if not with_grad:
        corr = total_correlation(H, Y, cfg)
        return recon - alpha * corr, recon, corr, None
    dec_grads, g_h = backward(decoder, dec_cache, g_out)
    if alpha > 0:
        cl = cca_loss_grad(H, Y, cfg)
        corr = cl.value
        g_h = g_h - alpha * cl.grad_x
    else:
        corr = total_correlation(H, Y, cfg)
    enc_grads, _ = backward(encoder, enc_cache, g_h)
    return recon - alpha * corr, recon, corr, enc_grads + dec_grads


def build_autoencoder(in_dim=100, hidden=60, embed_dim=EMBED_DIM, seed=0):
    widths = [in_dim, hidden, embed_dim, hidden, in_dim]
    net = Mlp.build(widths, ["tanh", "linear", "tanh", "linear"], seed=seed)
    return net


def train_cccae(frames: FeatureMatrix, motion: HeadMotionSequence, mask=None, alpha=1.0,
                cfg: TrainConfig | None = None, *, hidden=60, embed_dim=EMBED_DIM,
                pretrain_epochs=5, reg=TRAIN_REG, norm_stats=None, val=None, log=None):
    """Train the canonical-correlation-constrained autoencoder.

    ``frames`` are raw waveform frames (kind wave100); normalisation stats are
    estimated from the masked frames unless given. ``val`` is an optional
    ``(frames, motion, mask)`` triple used for early stopping. ``log`` receives
    one dict per epoch, epoch 0 being the state after pretraining.
    """
    cfg = cfg or TrainConfig(batch_size=512)
    if alpha < 0:
        raise DataError("alpha must be >= 0")
    if frames.n_frames != len(motion):
        raise DataError(f"frames ({frames.n_frames}) and motion ({len(motion)}) are not aligned")
    if alpha > 0 and cfg.batch_size < 2 * embed_dim:
        raise DataError(
            f"batch size {cfg.batch_size} is below 2 x embedding width ({2 * embed_dim}); "
            "minibatch covariance would be unusable"
        )
    keep = _mask_or_all(mask, frames.n_frames)
    if norm_stats is None:
        _, norm_stats = variance_normalize(frames.with_data(frames.data[keep]))
    X = norm_stats.apply(frames.data[keep])
    Y = motion.data[keep]

    net = build_autoencoder(frames.dim, hidden, embed_dim, seed=cfg.seed)
    pre_cfg = TrainConfig(batch_size=cfg.batch_size, epochs=pretrain_epochs, seed=cfg.seed,
                          patience=0, val_fraction=0.0, lr=cfg.lr)
    net = layerwise_pretrain(net, X, pre_cfg)
    encoder, decoder = net[:2], net[2:]
    params = encoder.params() + decoder.params()

    Xv = Yv = None
    if val is not None:
        vf, vm, vmask = val
        vkeep = _mask_or_all(vmask, vf.n_frames)
        Xv, Yv = norm_stats.apply(vf.data[vkeep]), vm.data[vkeep]
    elif cfg.val_fraction > 0:
        tr, va = split_indices(X.shape[0], cfg.val_fraction, cfg.seed)
        X, Y, Xv, Yv = X[tr], Y[tr], X[va], Y[va]

    def loss_grad(idx):
        obj, _, _, grads = cccae_objective(encoder, decoder, X[idx], Y[idx], alpha, reg)
        return obj, grads

    def full(Xs, Ys):
        obj, recon, corr, _ = cccae_objective(encoder, decoder, Xs, Ys, alpha, reg, with_grad=False)
        return {"objective": obj, "recon": recon, "cca": corr}

    records = []

    def on_epoch(epoch, hist):
        rec = {"epoch": epoch, **full(X, Y)}
        if hist["val"]:
            rec["val_objective"] = hist["val"][-1]
        records.append(rec)
        if log:
            log(rec)

    initial = {"epoch": 0, **full(X, Y)}
    records.append(initial)
    if log:
        log(initial)
    val_loss = None
    if Xv is not None:
        def val_loss():
            return full(Xv, Yv)["objective"]
    hist = train(params, X.shape[0], loss_grad, cfg, val_loss=val_loss, on_epoch=on_epoch)
    hist["epochs"] = records
    return CccaeModel(encoder, decoder, float(alpha), norm_stats, hist)


def encode(model: CccaeModel, frames: FeatureMatrix) -> FeatureMatrix:
    """Embed raw waveform frames (the model applies its own normalisation)."""
    if frames.dim != model.encoder.n_in:
        raise DataError(f"encoder expects {model.encoder.n_in}-dim frames, got {frames.dim}")
    return FeatureMatrix(model.encoder(model.norm_stats.apply(frames.data)), "embed", frames.frame_rate)


def decode(model: CccaeModel, embedding: FeatureMatrix) -> np.ndarray:
    """Reconstruct normalised waveform frames from embeddings."""
    return model.decoder(embedding.data)


# --------------------------------------------------------------------------
# B. context-window regressor

def assemble_context(features, half_window=CONTEXT) -> np.ndarray:
    """Row t concatenates frames t-h..t+h, replicating the edge frames."""
    x = features.data if isinstance(features, FeatureMatrix) else np.atleast_2d(features)
    padded = _pad_edges(x, half_window)
    width = 2 * half_window + 1
    view = np.lib.stride_tricks.sliding_window_view(padded, width, axis=0)  # (T, D, width)
    return np.ascontiguousarray(view.transpose(0, 2, 1)).reshape(x.shape[0], width * x.shape[1])


def _pad_edges(x, h):
    return np.concatenate([np.repeat(x[:1], h, axis=0), x, np.repeat(x[-1:], h, axis=0)])


class _ContextBank:
    """Edge-padded utterances stacked so any context row is a contiguous slice."""

    def __init__(self, arrays, half_window):
        self.h = half_window
        self.width = 2 * half_window + 1
        padded = [_pad_edges(a, half_window) for a in arrays]
        self.data = np.concatenate(padded)
        starts = np.cumsum([0] + [p.shape[0] for p in padded[:-1]])
        self.starts = [s + np.arange(a.shape[0]) for s, a in zip(starts, arrays)]
        self._offsets = np.arange(self.width)

    def rows(self, start_idx):
        block = self.data[start_idx[:, None] + self._offsets]
        return block.reshape(start_idx.size, -1)


@dataclass
class RegressorModel:
    net: Mlp
    context: int
    feature_kind: str
    feature_stats: NormStats
    target_stats: NormStats | None = None  # the net predicts standardised rotations

    def __post_init__(self):
        if self.net.n_out != 3:
            raise DataError("regressor must output 3 values")
        if self.net.n_in != (2 * self.context + 1) * self.feature_stats.std.size:
            raise DataError("regressor input width does not match context x feature dims")


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def _collect(features, motion, masks):
    feats, mots = _as_list(features), _as_list(motion)
    masks = _as_list(masks) if masks is not None else [None] * len(feats)
    if not (len(feats) == len(mots) == len(masks)):
        raise DataError("features, motion and masks must pair up")
    out = []
    for f, m, k in zip(feats, mots, masks):
        if f.n_frames != len(m):
            raise DataError(f"features ({f.n_frames}) and motion ({len(m)}) are not aligned")
        out.append((f, m, _mask_or_all(k, f.n_frames)))
    return out


def train_regressor(features, motion, mask=None, cfg: TrainConfig | None = None, *,
                    hidden=(256, 128), context=CONTEXT, val=None, pretrain_epochs=0, log=None):
    """Fit the context-window regressor under MSE on raw rotation-vector targets.

    ``features``/``motion``/``mask`` may be single items or parallel lists of
    utterances (contexts never straddle utterances). ``val`` is an optional
    ``(features, motion, mask)`` triple of the same form for early stopping.
    """
    cfg = cfg or TrainConfig()
    items = _collect(features, motion, mask)
    kinds = {f.kind for f, _, _ in items}
    if len(kinds) != 1:
        raise DataError(f"mixed feature kinds {sorted(kinds)}")
    kind = kinds.pop()
    stacked = np.concatenate([f.data[k] for f, _, k in items])
    _, stats = variance_normalize(FeatureMatrix(stacked, kind))

    def bank_for(its):
        bank = _ContextBank([stats.apply(f.data) for f, _, _ in its], context)
        idx = np.concatenate([s[k] for s, (_, _, k) in zip(bank.starts, its)])
        tgt = np.concatenate([m.data[k] for _, m, k in its])
        return bank, idx, target_stats.apply(tgt)

    raw_targets = np.concatenate([m.data[k] for _, m, k in items])
    target_stats = NormStats(raw_targets.mean(axis=0), np.maximum(raw_targets.std(axis=0), 1e-12))
    bank, starts, targets = bank_for(items)
    dim = stacked.shape[1]
    widths = [(2 * context + 1) * dim, *hidden, 3]
    net = Mlp.build(widths, ["relu"] * len(hidden) + ["linear"], seed=cfg.seed)
    if pretrain_epochs:
        pre_cfg = TrainConfig(batch_size=cfg.batch_size, epochs=pretrain_epochs, seed=cfg.seed,
                              patience=0, val_fraction=0.0, lr=cfg.lr)
        sample = bank.rows(starts)
        pre = layerwise_pretrain(net[:-1], sample, pre_cfg)
        net = Mlp(pre.layers + [net.layers[-1]])

    if val is not None:
        vbank, vstarts, vtargets = bank_for(_collect(*val))
    elif cfg.val_fraction > 0:
        tr, va = split_indices(starts.size, cfg.val_fraction, cfg.seed)
        vbank, vstarts, vtargets = bank, starts[va], targets[va]
        starts, targets = starts[tr], targets[tr]
    else:
        vbank = None

    def loss_grad(idx):
        cache, out = forward(net, bank.rows(starts[idx]))
        loss, g = mse(out, targets[idx])
        return loss, backward(net, cache, g)[0]

    def predict_rows(b, s):
        return np.concatenate([net(b.rows(s[i : i + 4096])) for i in range(0, s.size, 4096)])

    val_loss = None
    if vbank is not None:
        def val_loss():
            return mse(predict_rows(vbank, vstarts), vtargets)[0]

    def on_epoch(epoch, hist):
        if log:
            rec = {"epoch": epoch, "train_mse": hist["train"][-1]}
            if hist["val"]:
                rec["val_mse"] = hist["val"][-1]
            log(rec)

    train(net.params(), starts.size, loss_grad, cfg, val_loss=val_loss, on_epoch=on_epoch)
    return RegressorModel(net, context, kind, stats, target_stats)


def predict_motion(model: RegressorModel, features: FeatureMatrix) -> HeadMotionSequence:
    if features.kind != model.feature_kind:
        raise DataError(f"regressor was trained on {model.feature_kind} features, got {features.kind}")
    if features.dim != model.feature_stats.std.size:
        raise DataError(f"expected {model.feature_stats.std.size}-dim features, got {features.dim}")
    bank = _ContextBank([model.feature_stats.apply(features.data)], model.context)
    s = bank.starts[0]
    out = np.concatenate([model.net(bank.rows(s[i : i + 4096])) for i in range(0, s.size, 4096)])
    if model.target_stats is not None:
        out = model.target_stats.invert(out)
    return HeadMotionSequence(out, features.frame_rate)


# --------------------------------------------------------------------------
# C. post-filter

@dataclass
class PostFilterModel:
    net: Mlp
    window: int
    stats: NormStats

    def __post_init__(self):
        if self.net.n_in != 3 * self.window or self.net.n_out != 3 * self.window:
            raise DataError("post-filter widths must equal 3 x window")


def motion_windows(data, window=POSTFILTER_WINDOW):
    """Non-overlapping windows flattened frame-major, shape (floor(T/window), 3*window)."""
    n = data.shape[0] // window
    return data[: n * window].reshape(n, window * data.shape[1])


def train_postfilter(clean_motion, cfg: TrainConfig | None = None, *, window=POSTFILTER_WINDOW,
                     hidden=64, val=None):
    """Autoencoder over non-overlapping clean motion windows."""
    cfg = cfg or TrainConfig(batch_size=32, epochs=300, patience=30)
    seqs = _as_list(clean_motion)
    for m in seqs:
        if len(m) < window:
            raise DataError(f"post-filter training needs >= {window} frames, got {len(m)}")
    allframes = np.concatenate([m.data for m in seqs])
    stats = NormStats(allframes.mean(axis=0), np.maximum(allframes.std(axis=0), 1e-12))
    X = np.concatenate([motion_windows(stats.apply(m.data), window) for m in seqs])
    net = Mlp.build([3 * window, hidden, 3 * window], ["tanh", "linear"], seed=cfg.seed)
    kw = {}
    if val is not None:
        Xv = np.concatenate([motion_windows(stats.apply(m.data), window) for m in _as_list(val)])
        kw = {"X_val": Xv, "Y_val": Xv}
    fit_mse(net, X, X, cfg, **kw)
    return PostFilterModel(net, window, stats)


def apply_postfilter(model: PostFilterModel, motion: HeadMotionSequence) -> HeadMotionSequence:
    """Reconstruct every hop-1 window and average the overlapping reconstructions."""
    w = model.window
    T = len(motion)
    if T < w:
        raise DataError(f"post-filter needs >= {w} frames, got {T}")
    x = model.stats.apply(motion.data)
    view = np.lib.stride_tricks.sliding_window_view(x, w, axis=0)  # (T-w+1, 3, w)
    wins = np.ascontiguousarray(view.transpose(0, 2, 1)).reshape(T - w + 1, 3 * w)
    recon = model.net(wins).reshape(T - w + 1, w, 3)
    acc = np.zeros_like(x)
    cnt = np.zeros(T)
    n = T - w + 1
    for k in range(w):
        acc[k : k + n] += recon[:, k]
        cnt[k : k + n] += 1
    return HeadMotionSequence(model.stats.invert(acc / cnt[:, None]), motion.frame_rate)
