"""Objective evaluation: NMSE, local CCA, SD profiles and chance scores."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .cca import EVAL_REG, CcaConfig, local_cca
from .errors import DataError
from .headmotion import HeadMotionSequence, sd_profile

logger = logging.getLogger(__name__)

LOCAL_CCA_WINDOW = 300


def _arr(x):
    return x.data if isinstance(x, HeadMotionSequence) else np.atleast_2d(np.asarray(x, dtype=np.float64))


def nmse(pred, truth) -> float:
    """Per-dimension MSE divided by the (population) variance of the truth, averaged over dims."""
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise DataError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    if t.shape[0] < 2:
        raise DataError("NMSE needs at least 2 frames")
    var = t.var(axis=0)
    ok = var >= 1e-12
    if not np.any(ok):
        raise DataError("ground truth is constant in every dimension")
    if not np.all(ok):
        logger.warning("excluding constant truth dimensions %s from NMSE", np.flatnonzero(~ok).tolist())
    err = np.mean((p - t) ** 2, axis=0)
    return float(np.mean(err[ok] / var[ok]))


@dataclass
class EvalReport:
    nmse: float
    local_cca: float
    sd_pred: np.ndarray
    sd_truth: np.ndarray
    chance: float | None = None
    system: str = ""
    seed: int | None = None
    subject: str = field(default="", repr=False)

    def to_dict(self):
        return {
            "nmse": float(self.nmse),
            "local_cca": float(self.local_cca),
            "sd_pred": [float(v) for v in self.sd_pred],
            "sd_truth": [float(v) for v in self.sd_truth],
            "chance": None if self.chance is None else float(self.chance),
            "system": self.system,
            "seed": self.seed,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["nmse"], d["local_cca"], np.asarray(d["sd_pred"]), np.asarray(d["sd_truth"]),
                   d.get("chance"), d.get("system", ""), d.get("seed"))


def evaluate_system(pred, truth, window=LOCAL_CCA_WINDOW, reg=EVAL_REG, system="", seed=None,
                    chance=None) -> EvalReport:
    p, t = _arr(pred), _arr(truth)
    if p.shape != t.shape:
        raise DataError(f"prediction {p.shape} and truth {t.shape} differ in shape")
    lcca = local_cca(p, t, window, CcaConfig(reg=reg))
    return EvalReport(
        nmse=nmse(p, t),
        local_cca=lcca,
        sd_pred=sd_profile(HeadMotionSequence(p)),
        sd_truth=sd_profile(HeadMotionSequence(t)),
        chance=chance,
        system=system,
        seed=seed,
    )


def chance_score(truth, unrelated, window=LOCAL_CCA_WINDOW, seed=0, reg=EVAL_REG) -> float:
    """Local CCA against an unrelated sequence rotated by a seeded random offset.

    The offset is at least ``window`` frames when the sequence is long enough
    (otherwise no shift is possible and the sequence is used as is); both are
    then truncated to their common length.
    """
    t, u = _arr(truth), _arr(unrelated)
    if t.shape[0] < window or u.shape[0] < window:
        raise DataError(f"chance score needs {window} frames in both sequences")
    n = u.shape[0]
    if n > 2 * window:
        shift = int(np.random.default_rng(seed).integers(window, n - window + 1))
        u = np.roll(u, shift, axis=0)
    m = min(t.shape[0], u.shape[0])
    return local_cca(t[:m], u[:m], window, CcaConfig(reg=reg))


def format_table(rows, columns=("system", "subject", "nmse", "local_cca", "chance")) -> str:
    """Plain-text aligned table; ``rows`` are dicts."""
    def cell(v):
        if v is None:
            return "-"
        if isinstance(v, float):
            return f"{v:.3f}"
        return str(v)

    body = [[cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(columns)]
    sep = "+".join("-" * (w + 2) for w in widths)
    lines = [" | ".join(c.ljust(w) for c, w in zip(columns, widths)), sep]
    lines += [" | ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"
