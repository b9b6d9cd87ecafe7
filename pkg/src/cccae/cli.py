"""Command-line entry point.

Exit codes: 0 success, 2 usage error, 3 data/format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import formats, models, pipeline, synth
from .config import FEATURE_KINDS, RunConfig, load_config
from .errors import DataError, NumericalError
from .headmotion import read_motion_csv, write_motion_csv

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _common(p, manifest=True):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--manifest", type=Path, required=manifest)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--feature", choices=FEATURE_KINDS)
    p.add_argument("--no-mask", action="store_true", help="use every frame, not only speaking ones")
    p.add_argument("--postfilter", action="store_true")


def build_parser():
    ap = argparse.ArgumentParser(prog="cccae", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate the synthetic paired corpus")
    _common(p, manifest=False)
    p.add_argument("--duration", type=float, default=600.0)
    p.add_argument("--utterances", type=int, default=10)

    p = sub.add_parser("features", help="extract features for every utterance to FMAT")
    _common(p)
    p.add_argument("--models", type=Path, help="model dir (needed for --feature embed)")

    p = sub.add_parser("train", help="train CCCAE, regressor and post-filter")
    _common(p)

    p = sub.add_parser("embed", help="encode waveform frames with a trained CCCAE")
    _common(p)
    p.add_argument("--models", type=Path, required=True)

    p = sub.add_parser("predict", help="predict head motion for a split")
    _common(p)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("--split", default="test", choices=formats.SPLITS)

    p = sub.add_parser("smooth", help="apply the post-filter to motion CSV files")
    _common(p, manifest=False)
    p.add_argument("--models", type=Path, required=True)
    p.add_argument("inputs", nargs="+", type=Path)

    p = sub.add_parser("evaluate", help="NMSE / local CCA / SD reports for predictions")
    _common(p)
    p.add_argument("--predictions", action="append", required=True, metavar="[NAME=]DIR")
    p.add_argument("--split", default="test", choices=formats.SPLITS)

    p = sub.add_parser("gradcheck", help="finite-difference check of the CCCAE objective gradient")
    _common(p, manifest=False)
    p.add_argument("--frames", type=int, default=300)
    return ap


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return cfg.replace(seed=args.seed, alpha=args.alpha, feature=args.feature,
                       use_mask=False if args.no_mask else None)


def cmd_synth(args):
    cfg = _config(args)
    spec = synth.SyntheticSpec(duration=args.duration, n_utterances=args.utterances, seed=cfg.seed)
    m = pipeline.generate_synthetic_corpus(spec, args.out)
    print(f"wrote {len(m)} utterances to {args.out}")


def cmd_features(args):
    cfg = _config(args)
    man = formats.read_manifest(args.manifest)
    if cfg.feature == "embed" and args.models is None:
        raise DataError("--feature embed needs --models")
    cccae = pipeline.load_cccae(args.models / pipeline.CCCAE_FILE) if cfg.feature == "embed" else None
    args.out.mkdir(parents=True, exist_ok=True)
    for e in man.entries:
        feats = pipeline.load_features(e, cfg.feature, cccae)
        formats.write_fmat(args.out / f"{e.id}.fmat", feats.data)
    print(f"wrote {cfg.feature} features for {len(man)} utterances")


def cmd_train(args):
    cfg = _config(args)
    man = formats.read_manifest(args.manifest)
    written = pipeline.run_training(man, cfg, args.out)
    for name, path in written.items():
        print(f"{name}: {path}")


def cmd_embed(args):
    man = formats.read_manifest(args.manifest)
    cccae = pipeline.load_cccae(args.models / pipeline.CCCAE_FILE)
    args.out.mkdir(parents=True, exist_ok=True)
    for e in man.entries:
        formats.write_fmat(args.out / f"{e.id}.fmat", models.encode(cccae, pipeline.load_frames(e)).data)
    print(f"embedded {len(man)} utterances")


def cmd_predict(args):
    man = formats.read_manifest(args.manifest)
    paths = pipeline.run_prediction(man, args.split, args.models, args.out, args.postfilter)
    print(f"wrote {len(paths)} predictions to {args.out}")


def cmd_smooth(args):
    pf = pipeline.load_postfilter(args.models / pipeline.POSTFILTER_FILE)
    args.out.mkdir(parents=True, exist_ok=True)
    for path in args.inputs:
        write_motion_csv(args.out / path.name, models.apply_postfilter(pf, read_motion_csv(path)))
    print(f"smoothed {len(args.inputs)} files")


def cmd_evaluate(args):
    cfg = _config(args)
    man = formats.read_manifest(args.manifest)
    preds = {}
    for spec in args.predictions:
        name, sep, path = spec.partition("=")
        if not sep:
            name, path = Path(spec).name, spec
        preds[name] = Path(path)
    pipeline.run_evaluation(man, args.split, preds, args.out, use_mask=cfg.use_mask,
                            window=cfg.cca_window, seed=cfg.seed)
    sys.stdout.write((args.out / "summary.txt").read_text(encoding="utf-8"))


def gradcheck_report(seed=0, frames=300, in_dim=20, embed_dim=8, hidden=12):
    """Finite-difference errors of the CCA loss and the full CCCAE objective."""
    from .cca import CcaConfig, cca_loss_grad, total_correlation
    from .nn import gradient_check

    rng = np.random.default_rng(seed)
    X = rng.standard_normal((frames, in_dim))
    Y = X[:, :3] @ rng.standard_normal((3, 3)) + 0.5 * rng.standard_normal((frames, 3))
    H = rng.standard_normal((frames, embed_dim)) + 0.3 * np.tile(Y, (1, 3))[:, :embed_dim]
    cfg = CcaConfig(reg=1e-4)

    def cca_fn():
        g = cca_loss_grad(H, Y, cfg)
        return total_correlation(H, Y, cfg), [g.grad_x]

    net = models.build_autoencoder(in_dim, hidden, embed_dim, seed=seed)
    enc, dec = net[:2], net[2:]
    params = enc.params() + dec.params()
    out = {"cca_loss": gradient_check(cca_fn, [H], seed=seed)}
    for alpha in (1.0, 0.0):
        def fn(alpha=alpha):
            obj, _, _, grads = models.cccae_objective(enc, dec, X, Y, alpha, cfg.reg)
            return obj, grads
        out[f"objective_alpha{alpha:g}"] = gradient_check(fn, params, seed=seed)
    return out


def cmd_gradcheck(args):
    cfg = _config(args)
    rep = gradcheck_report(cfg.seed, args.frames)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(rep, indent=2, sort_keys=True) + "\n"
    args.out.write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    if max(rep.values()) > 1e-4:
        raise NumericalError(f"gradient check failed: max relative error {max(rep.values()):.3g}")


COMMANDS = {
    "synth-data": cmd_synth, "features": cmd_features, "train": cmd_train, "embed": cmd_embed,
    "predict": cmd_predict, "smooth": cmd_smooth, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
