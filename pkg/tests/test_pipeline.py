import json
import shutil

import numpy as np
import pytest

from cccae import audio, cca, formats, pipeline, synth
from cccae.config import RunConfig
from cccae.errors import DataError
from cccae.headmotion import read_motion_csv, velocity

SMALL = dict(cccae_epochs=3, cccae_batch=256, pretrain_epochs=1, regressor_epochs=2,
             regressor_hidden1=32, regressor_hidden2=16, postfilter_epochs=3)


def small_spec(seed=0):
    return synth.SyntheticSpec(duration=100.0, n_utterances=5, seed=seed)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    return pipeline.generate_synthetic_corpus(small_spec(), tmp_path_factory.mktemp("corpus"))


@pytest.fixture(scope="module")
def trained(corpus, tmp_path_factory):
    out = tmp_path_factory.mktemp("models")
    written = pipeline.run_training(corpus, RunConfig(**SMALL), out)
    return out, written


def files_of(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


# --------------------------------------------------------------------------
# corpus

def test_corpus_layout(corpus):
    assert len(corpus) == 5
    assert [len(corpus.split(s)) for s in formats.SPLITS] == [3, 1, 1]
    for e in corpus.entries:
        assert audio.read_wav(e.audio).samples.size == 20 * 4000
        assert len(read_motion_csv(e.motion)) == 2000
        assert formats.read_mask_csv(e.mask).size == 2000


def test_default_spec_arithmetic():
    spec = synth.SyntheticSpec()
    uid, split, utt = next(synth.generate(spec))
    assert (spec.duration, spec.n_utterances) == (600.0, 10)
    assert utt.audio.samples.size == 4000 * 60 and len(utt.motion) == 6000
    assert sum(1 for _ in synth.generate(synth.SyntheticSpec(duration=10.0))) == 10


def test_corpus_is_deterministic(corpus, tmp_path):
    again = pipeline.generate_synthetic_corpus(small_spec(), tmp_path)
    assert files_of(corpus.root) == files_of(again.root)


def test_corpus_seed_changes_data(tmp_path):
    a = pipeline.generate_synthetic_corpus(synth.SyntheticSpec(duration=10.0, n_utterances=5, seed=1), tmp_path / "a")
    b = pipeline.generate_synthetic_corpus(synth.SyntheticSpec(duration=10.0, n_utterances=5, seed=2), tmp_path / "b")
    assert a.entries[0].audio.read_bytes() != b.entries[0].audio.read_bytes()


def test_corpus_validity_oracle(corpus):
    """The planted relation is visible to a hand-crafted feature before any learning."""
    entries = corpus.entries
    feats = [audio.variance_normalize(audio.compute_mfcc(audio.read_wav(e.audio)))[0].data for e in entries]
    motions = [read_motion_csv(e.motion).data for e in entries]
    paired = np.mean([cca.local_cca(f[: len(m)], m[: len(f)]) for f, m in zip(feats, motions)])
    # same feature dimensionality against motion from a different utterance
    unrelated = np.mean([cca.local_cca(feats[i][:1900], motions[(i + 1) % 5][:1900]) for i in range(5)])
    assert paired >= unrelated + 0.1


def test_synthetic_spec_guards():
    with pytest.raises(DataError):
        synth.SyntheticSpec(latent_dim=2)
    with pytest.raises(DataError):
        synth.SyntheticSpec(speaking_duty=0.0)


# --------------------------------------------------------------------------
# training

def test_training_writes_three_models_and_stats(trained):
    out, written = trained
    assert sorted(written) == ["cccae", "postfilter", "regressor", "stats"]
    assert sorted(p.name for p in out.iterdir()) == sorted(
        [pipeline.CCCAE_FILE, pipeline.REGRESSOR_FILE, pipeline.POSTFILTER_FILE, pipeline.STATS_FILE,
         pipeline.LOG_FILE])


def test_run_log_has_epoch_objectives(trained):
    log = (trained[0] / pipeline.LOG_FILE).read_text().splitlines()
    cccae_lines = [l for l in log if l.startswith("cccae ")]
    assert len(cccae_lines) >= 4  # initial record plus one per epoch
    assert all("objective=" in l for l in cccae_lines)
    assert any(l.startswith("regressor ") for l in log)
    assert "alpha = 1.0" in log


def test_training_is_reproducible_and_ignores_test_split(corpus, trained, tmp_path):
    # mutate the held-out audio: neither stats nor models may change
    root = tmp_path / "corpus"
    shutil.copytree(corpus.root, root)
    test_entry = corpus.split("test")[0]
    clip = audio.read_wav(root / test_entry.audio.name)
    audio.write_wav(root / test_entry.audio.name, audio.AudioClip(-0.5 * clip.samples, clip.sample_rate))
    man = formats.read_manifest(root / "manifest.csv")
    pipeline.run_training(man, RunConfig(**SMALL), tmp_path / "models")
    assert files_of(tmp_path / "models") == files_of(trained[0])


def test_alpha_runs_share_initial_reconstruction(corpus, trained, tmp_path):
    pipeline.run_training(corpus, RunConfig(alpha=0.0, **SMALL), tmp_path)

    def first(d):
        line = next(l for l in (d / pipeline.LOG_FILE).read_text().splitlines() if l.startswith("cccae "))
        return dict(kv.split("=") for kv in line.split()[1:])

    a0, a1 = first(tmp_path), first(trained[0])
    assert a0["recon"] == a1["recon"] and a0["cca"] == a1["cca"]
    assert float(a1["objective"]) == pytest.approx(float(a0["objective"]) - float(a1["cca"]), abs=1e-12)


def test_hand_feature_training(corpus, tmp_path):
    written = pipeline.run_training(corpus, RunConfig(feature="mfcc39", **SMALL), tmp_path)
    assert "cccae" not in written
    assert pipeline.load_regressor(written["regressor"]).feature_kind == "mfcc39"
    assert formats.read_stats(written["stats"]).mean.size == 39


def test_stage_error_names_stage(corpus, tmp_path):
    cfg = RunConfig(**{**SMALL, "cccae_batch": 16})
    with pytest.raises(DataError, match=r"^\[cccae\]"):
        pipeline.run_training(corpus, cfg, tmp_path)


def test_training_needs_valid_split(corpus, tmp_path):
    man = formats.Manifest([e for e in corpus.entries if e.split != "valid"], corpus.root)
    with pytest.raises(DataError, match="valid"):
        pipeline.run_training(man, RunConfig(**SMALL), tmp_path)


def test_model_files_round_trip(trained):
    out, _ = trained
    cccae, reg, pf = pipeline.load_models(out)
    pipeline.save_regressor(out.parent / "r.model", reg)
    assert (out.parent / "r.model").read_bytes() == (out / pipeline.REGRESSOR_FILE).read_bytes()
    assert reg.target_stats is not None and cccae.encoder.widths == [100, 60, 30]
    with pytest.raises(DataError):
        pipeline.load_cccae(out / pipeline.REGRESSOR_FILE)


# --------------------------------------------------------------------------
# prediction

@pytest.fixture(scope="module")
def predictions(corpus, trained, tmp_path_factory):
    base = tmp_path_factory.mktemp("pred")
    plain = pipeline.run_prediction(corpus, "test", trained[0], base / "plain")
    smooth = pipeline.run_prediction(corpus, "test", trained[0], base / "pf", use_postfilter=True)
    return base, plain, smooth


def test_prediction_covers_every_frame(corpus, predictions):
    _, plain, smooth = predictions
    e = corpus.split("test")[0]
    n = audio.n_frames_for(audio.read_wav(e.audio).samples.size)
    assert formats.read_mask_csv(e.mask).sum() < n  # some frames are silent
    assert len(read_motion_csv(plain[0])) == n and len(read_motion_csv(smooth[0])) == n


def test_postfilter_does_not_raise_velocity_sd(predictions):
    _, plain, smooth = predictions
    assert np.all(velocity(read_motion_csv(smooth[0])).std(axis=0)
                  <= velocity(read_motion_csv(plain[0])).std(axis=0))


def test_predict_without_postfilter_model(corpus, trained, tmp_path):
    d = tmp_path / "m"
    shutil.copytree(trained[0], d)
    (d / pipeline.POSTFILTER_FILE).unlink()
    with pytest.raises(DataError, match="post-filter"):
        pipeline.run_prediction(corpus, "test", d, tmp_path / "p", use_postfilter=True)


# --------------------------------------------------------------------------
# evaluation

def test_truth_against_itself(corpus, tmp_path):
    d = tmp_path / "truth"
    d.mkdir()
    for e in corpus.split("test"):
        shutil.copy(e.motion, d / f"{e.id}.csv")
    reports = pipeline.run_evaluation(corpus, "test", {"truth": d}, tmp_path / "eval")
    r = reports["truth"][corpus.split("test")[0].id]
    assert r.nmse == 0.0 and r.local_cca == pytest.approx(1.0, abs=1e-5)


def test_evaluation_outputs(corpus, predictions, tmp_path):
    base, _, _ = predictions
    pipeline.run_evaluation(corpus, "test", {"plain": base / "plain", "pf": base / "pf"}, tmp_path)
    uid = corpus.split("test")[0].id
    rep = json.loads((tmp_path / "plain" / f"{uid}.json").read_text())
    assert rep["system"] == "plain" and rep["chance"] is not None
    summary = (tmp_path / "summary.txt").read_text().splitlines()
    assert summary[0].split("|")[0].strip() == "system"
    assert [l.split("|")[0].strip() for l in summary[2:4]] == ["plain", "pf"]
    assert any(l.startswith("ground truth") for l in summary)


def test_missing_prediction_names_utterance(corpus, tmp_path):
    uid = corpus.split("test")[0].id
    with pytest.raises(DataError, match=uid):
        pipeline.run_evaluation(corpus, "test", {"x": tmp_path}, tmp_path / "eval")


def test_frames_fmat_audio(corpus, tmp_path):
    e = corpus.entries[0]
    frames = pipeline.load_frames(e)
    formats.write_fmat(tmp_path / "f.fmat", frames.data)
    alt = formats.ManifestEntry(e.id, tmp_path / "f.fmat", e.motion, None, e.split)
    assert np.array_equal(pipeline.load_frames(alt).data, frames.data)
    with pytest.raises(DataError):
        pipeline.load_features(alt, "mfcc39")
    # without a mask file the energy rule applies
    mask = pipeline.load_mask(alt, frames.n_frames, frames)
    assert mask.mean() == pytest.approx(0.7, abs=0.01)
