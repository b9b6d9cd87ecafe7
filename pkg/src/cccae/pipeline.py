"""End-to-end flows: corpus generation, training, prediction and evaluation."""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from . import audio as sig
from . import formats, models, synth
from .audio import FeatureMatrix, NormStats, variance_normalize
from .config import RunConfig
from .errors import CccaeError, DataError, FormatError
from .headmotion import HeadMotionSequence, read_motion_csv, write_motion_csv
from .metrics import EvalReport, chance_score, evaluate_system, format_table

logger = logging.getLogger(__name__)

CCCAE_FILE = "cccae.model"
REGRESSOR_FILE = "regressor.model"
POSTFILTER_FILE = "postfilter.model"
STATS_FILE = "norm_stats.fmat"
LOG_FILE = "run_log.txt"


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except CccaeError as exc:
        raise type(exc)(f"[{name}] {exc}") from exc


# --------------------------------------------------------------------------
# corpus

def generate_synthetic_corpus(spec: synth.SyntheticSpec, out_dir) -> formats.Manifest:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for uid, split, utt in synth.generate(spec):
        wav, mot, msk = out / f"{uid}.wav", out / f"{uid}_motion.csv", out / f"{uid}_mask.csv"
        sig.write_wav(wav, utt.audio)
        write_motion_csv(mot, utt.motion)
        formats.write_mask_csv(msk, utt.mask)
        entries.append(formats.ManifestEntry(uid, wav, mot, msk, split))
    formats.write_manifest(out / "manifest.csv", entries)
    return formats.read_manifest(out / "manifest.csv")


# --------------------------------------------------------------------------
# loading

def load_frames(entry: formats.ManifestEntry) -> FeatureMatrix:
    """Raw waveform frames from a WAV (resampled to 4 kHz) or a frames FMAT."""
    if entry.audio.suffix.lower() == ".fmat":
        return FeatureMatrix(formats.read_fmat(entry.audio), "wave100")
    clip = sig.read_wav(entry.audio)
    if clip.sample_rate != sig.SAMPLE_RATE:
        clip = sig.resample(clip, sig.SAMPLE_RATE)
    return sig.frame_waveform(clip)


def load_features(entry, kind, cccae=None) -> FeatureMatrix:
    if kind == "embed":
        if cccae is None:
            raise DataError("embed features need a trained CCCAE model")
        return models.encode(cccae, load_frames(entry))
    if kind == "wave100":
        return load_frames(entry)
    if entry.audio.suffix.lower() == ".fmat":
        raise DataError(f"utterance {entry.id}: {kind} features need WAV audio, not frames")
    clip = sig.read_wav(entry.audio)
    if clip.sample_rate != sig.SAMPLE_RATE:
        clip = sig.resample(clip, sig.SAMPLE_RATE)
    return sig.extract(clip, kind)


def frame_energy_mask(frames: FeatureMatrix, percentile=models.MASK_ENERGY_PERCENTILE):
    e = np.log(np.maximum(np.sum(frames.data**2, axis=1), sig.LOG_FLOOR_ENERGY))
    return e > np.percentile(e, percentile)


def load_mask(entry, n, frames=None):
    if entry.mask is not None:
        m = formats.read_mask_csv(entry.mask)
    else:
        m = frame_energy_mask(frames if frames is not None else load_frames(entry))
    if m.size < n:
        raise DataError(f"utterance {entry.id}: mask has {m.size} frames, need {n}")
    return m[:n]


def _aligned(entry, feats: FeatureMatrix, use_mask=True):
    motion = read_motion_csv(entry.motion)
    n = models.align_lengths(feats.n_frames, len(motion))
    feats = feats.with_data(feats.data[:n])
    motion = HeadMotionSequence(motion.data[:n], motion.frame_rate)
    mask = load_mask(entry, n) if use_mask else np.ones(n, dtype=bool)
    return feats, motion, mask


def _concat(items):
    f = items[0][0].with_data(np.concatenate([x[0].data for x in items]))
    m = HeadMotionSequence(np.concatenate([x[1].data for x in items]))
    return f, m, np.concatenate([x[2] for x in items])


# --------------------------------------------------------------------------
# model files

def save_cccae(path, model: models.CccaeModel):
    net = models.Mlp(model.encoder.layers + model.decoder.layers)
    formats.write_model(path, "cccae", net, {"encoder_layers": len(model.encoder), "alpha": model.alpha},
                        model.norm_stats)


def load_cccae(path) -> models.CccaeModel:
    kind, net, meta, stats = formats.read_model(path)
    if kind != "cccae" or stats is None:
        raise DataError(f"{path} is not a CCCAE model")
    k = int(meta["encoder_layers"])
    return models.CccaeModel(net[:k], net[k:], float(meta["alpha"]), stats)


def save_regressor(path, model: models.RegressorModel):
    meta = {"context": model.context, "feature": model.feature_kind}
    if model.target_stats is not None:
        meta["target_mean"] = model.target_stats.mean
        meta["target_std"] = model.target_stats.std
    formats.write_model(path, "regressor", model.net, meta, model.feature_stats)


def load_regressor(path) -> models.RegressorModel:
    kind, net, meta, stats = formats.read_model(path)
    if kind != "regressor" or stats is None:
        raise DataError(f"{path} is not a regressor model")
    target = None
    if "target_mean" in meta:
        try:
            target = NormStats([float(v) for v in meta["target_mean"].split()],
                               [float(v) for v in meta["target_std"].split()])
        except (KeyError, ValueError) as exc:
            raise FormatError(f"{path}: bad target stats") from exc
    return models.RegressorModel(net, int(meta["context"]), meta["feature"], stats, target)


def save_postfilter(path, model: models.PostFilterModel):
    formats.write_model(path, "postfilter", model.net, {"window": model.window}, model.stats)


def load_postfilter(path) -> models.PostFilterModel:
    kind, net, meta, stats = formats.read_model(path)
    if kind != "postfilter" or stats is None:
        raise DataError(f"{path} is not a post-filter model")
    return models.PostFilterModel(net, int(meta["window"]), stats)


# --------------------------------------------------------------------------
# flows

def run_training(manifest: formats.Manifest, config: RunConfig, out_dir):
    """Train every stage and write the model files; returns their paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_e, valid_e = manifest.split("train"), manifest.split("valid")
    if not train_e or not valid_e:
        raise DataError("training needs non-empty train and valid splits")
    log_lines = ["# config", *config.dumps().splitlines(), "# log"]

    def log(stage):
        def write(rec):
            log_lines.append(stage + " " + " ".join(
                f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in rec.items()))
        return write

    kind = config.feature
    written = {}
    cccae = None
    if kind == "embed":
        def load_split(entries):
            return [_aligned(e, load_frames(e), config.use_mask) for e in entries]

        tr = _stage("load", load_split, train_e)
        va = _stage("load", load_split, valid_e)
        F, M, K = _concat(tr)
        _, stats = _stage("normalize", variance_normalize, F.with_data(F.data[K]))
        cccae = _stage("cccae", models.train_cccae, F, M, K, config.alpha, config.cccae_train(),
                       hidden=config.hidden, embed_dim=config.embed_dim,
                       pretrain_epochs=config.pretrain_epochs, norm_stats=stats,
                       val=_concat(va), log=log("cccae"))
        written["cccae"] = out / CCCAE_FILE
        save_cccae(written["cccae"], cccae)
        tr_feats = [(models.encode(cccae, f), m, k) for f, m, k in tr]
        va_feats = [(models.encode(cccae, f), m, k) for f, m, k in va]
    else:
        def load_split(entries):
            return [_aligned(e, load_features(e, kind), config.use_mask) for e in entries]

        tr_feats = _stage("features", load_split, train_e)
        va_feats = _stage("features", load_split, valid_e)
        F, _, K = _concat(tr_feats)
        _, stats = _stage("normalize", variance_normalize, F.with_data(F.data[K]))
    written["stats"] = out / STATS_FILE
    formats.write_stats(written["stats"], stats)

    regressor = _stage(
        "regressor", models.train_regressor,
        [f for f, _, _ in tr_feats], [m for _, m, _ in tr_feats], [k for _, _, k in tr_feats],
        config.regressor_train(), hidden=(config.regressor_hidden1, config.regressor_hidden2),
        context=config.context,
        val=([f for f, _, _ in va_feats], [m for _, m, _ in va_feats], [k for _, _, k in va_feats]),
        log=log("regressor"),
    )
    written["regressor"] = out / REGRESSOR_FILE
    save_regressor(written["regressor"], regressor)

    postfilter = _stage(
        "postfilter", models.train_postfilter, [m for _, m, _ in tr_feats], config.postfilter_train(),
        window=config.postfilter_window, hidden=config.postfilter_hidden,
        val=[m for _, m, _ in va_feats],
    )
    written["postfilter"] = out / POSTFILTER_FILE
    save_postfilter(written["postfilter"], postfilter)

    (out / LOG_FILE).write_text("\n".join(log_lines) + "\n", encoding="utf-8")
    return written


def load_models(models_dir):
    d = Path(models_dir)
    reg = load_regressor(d / REGRESSOR_FILE)
    cccae = load_cccae(d / CCCAE_FILE) if reg.feature_kind == "embed" else None
    pf = load_postfilter(d / POSTFILTER_FILE) if (d / POSTFILTER_FILE).exists() else None
    return cccae, reg, pf


def predict_entry(entry, cccae, regressor, postfilter=None) -> HeadMotionSequence:
    """Motion for every frame of an utterance (speaking or not)."""
    feats = load_features(entry, regressor.feature_kind, cccae)
    motion = models.predict_motion(regressor, feats)
    if postfilter is not None:
        motion = models.apply_postfilter(postfilter, motion)
    return motion


def run_prediction(manifest: formats.Manifest, split, models_dir, out_dir, use_postfilter=False):
    """Write ``<id>.csv`` predicted motion for every utterance in ``split``."""
    cccae, reg, pf = load_models(models_dir)
    if use_postfilter and pf is None:
        raise DataError(f"no post-filter model in {models_dir}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for e in manifest.split(split):
        motion = _stage("predict", predict_entry, e, cccae, reg, pf if use_postfilter else None)
        p = out / f"{e.id}.csv"
        write_motion_csv(p, motion)
        paths.append(p)
    return paths


def evaluate_entries(manifest, split, pred_dir, system, use_mask=True, window=300, seed=0):
    entries = manifest.split(split)
    truths = [read_motion_csv(e.motion) for e in entries]
    reports = {}
    for i, e in enumerate(entries):
        p = Path(pred_dir) / f"{e.id}.csv"
        if not p.exists():
            raise DataError(f"missing prediction for utterance {e.id}: {p}")
        pred, truth = read_motion_csv(p), truths[i]
        n = models.align_lengths(len(pred), len(truth))
        keep = load_mask(e, n) if use_mask else np.ones(n, dtype=bool)
        P, Tm = pred.data[:n][keep], truth.data[:n][keep]
        other = truths[(i + 1) % len(truths)]
        chance = chance_score(Tm, other.data, window, seed=seed + i)
        reports[e.id] = evaluate_system(P, Tm, window, system=system, seed=seed, chance=chance)
    return reports


def summarize(system_reports, subject="") -> str:
    rows = []
    sd_rows = []
    truth_sd = None
    for system, reports in system_reports.items():
        r = list(reports.values())
        rows.append({
            "system": system, "subject": subject,
            "nmse": float(np.mean([x.nmse for x in r])),
            "local_cca": float(np.mean([x.local_cca for x in r])),
            "chance": float(np.mean([x.chance for x in r if x.chance is not None])),
        })
        sd_rows.append((system, np.mean([x.sd_pred for x in r], axis=0)))
        truth_sd = np.mean([x.sd_truth for x in r], axis=0)
    text = format_table(rows)
    cols = ("system", "sd_x", "sd_y", "sd_z", "vel_x", "vel_y", "vel_z")
    sd_table = [{"system": "ground truth", **dict(zip(cols[1:], map(float, truth_sd)))}]
    sd_table += [{"system": s, **dict(zip(cols[1:], map(float, v)))} for s, v in sd_rows]
    return text + "\n" + format_table(sd_table, cols)


def run_evaluation(manifest, split, predictions, out_dir, use_mask=True, window=300, seed=0):
    """``predictions`` maps system name -> prediction directory.

    Writes ``<system>/<id>.json`` reports and ``summary.txt``; returns the reports.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    all_reports = {}
    for system, pred_dir in predictions.items():
        reports = _stage("evaluate", evaluate_entries, manifest, split, pred_dir, system,
                         use_mask, window, seed)
        sdir = out / system
        sdir.mkdir(exist_ok=True)
        for uid, rep in reports.items():
            (sdir / f"{uid}.json").write_text(rep.to_json(), encoding="utf-8")
        all_reports[system] = reports
    (out / "summary.txt").write_text(summarize(all_reports, split), encoding="utf-8")
    return all_reports
