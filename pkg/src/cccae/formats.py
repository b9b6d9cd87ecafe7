"""On-disk formats: FMAT matrices, model containers, manifests and mask CSVs.

FMAT layout (all little-endian)::

    0   4s   magic b"FMAT"
    4   u32  version (1)
    8   u64  rows
    16  u64  cols
    24  u8   dtype (0 = float32, 1 = float64)
    25  7x   zero padding
    32  ...  row-major payload

A model container is a UTF-8 header (one ``key value...`` line each, layers
as ``dense <in> <out> <activation>``), a blank line, then FMAT blobs: W and b
for every layer in order, followed by the normalisation stats (2 x D: mean
row, std row) when the header has a ``stats`` line.
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import NormStats
from .errors import BadMagicError, DataError, FormatError, TruncatedError, UnknownDtypeError
from .nn import DenseLayer, Mlp

MAGIC = b"FMAT"
VERSION = 1
_HEADER = struct.Struct("<4sIQQB7x")
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {"f32": 0, "f64": 1, np.dtype("<f4"): 0, np.dtype("<f8"): 1}


def pack_fmat(matrix, dtype="f64") -> bytes:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise DataError(f"FMAT stores 2-D matrices, got {m.ndim}-D")
    if dtype not in _CODES:
        raise UnknownDtypeError(f"unknown FMAT dtype {dtype!r}")
    code = _CODES[dtype]
    m = m.astype(_DTYPES[code])
    if not np.all(np.isfinite(m)):
        raise DataError("refusing to write non-finite values to FMAT")
    return _HEADER.pack(MAGIC, VERSION, m.shape[0], m.shape[1], code) + m.tobytes(order="C")


def unpack_fmat(buf, offset=0):
    """Parse one FMAT blob from ``buf`` at ``offset``; returns (matrix, end offset)."""
    if len(buf) - offset < _HEADER.size:
        raise TruncatedError("FMAT header truncated")
    magic, version, rows, cols, code = _HEADER.unpack_from(buf, offset)
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported FMAT version {version}")
    if code not in _DTYPES:
        raise UnknownDtypeError(f"unknown FMAT dtype code {code}")
    dt = _DTYPES[code]
    start = offset + _HEADER.size
    end = start + rows * cols * dt.itemsize
    if len(buf) < end:
        raise TruncatedError(f"FMAT payload truncated: need {end - start} bytes, have {len(buf) - start}")
    data = np.frombuffer(buf, dtype=dt, count=rows * cols, offset=start).reshape(rows, cols)
    return data.astype(np.float64) if code == 0 else data.copy(), end


def write_fmat(path, matrix, dtype="f64") -> None:
    Path(path).write_bytes(pack_fmat(matrix, dtype))


def read_fmat(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m, end = unpack_fmat(buf)
    if end != len(buf):
        raise FormatError(f"{path}: {len(buf) - end} trailing bytes after FMAT payload")
    return m


# --------------------------------------------------------------------------
# model container

def _fmt(v):
    if isinstance(v, (list, tuple, np.ndarray)):
        return " ".join(repr(float(x)) for x in np.ravel(v))
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_model(path, kind, mlp: Mlp, meta=None, stats: NormStats | None = None) -> None:
    lines = [f"model {kind}"]
    lines += [f"dense {l.n_in} {l.n_out} {l.activation}" for l in mlp.layers]
    for k, v in (meta or {}).items():
        lines.append(f"{k} {_fmt(v)}")
    if stats is not None:
        lines.append(f"stats {stats.std.size} {int(stats.center)}")
    blob = ("\n".join(lines) + "\n\n").encode("utf-8")
    parts = [blob]
    for l in mlp.layers:
        parts += [pack_fmat(l.W), pack_fmat(l.b)]
    if stats is not None:
        parts.append(pack_fmat(np.vstack([stats.mean, stats.std])))
    Path(path).write_bytes(b"".join(parts))


def read_model(path):
    """Returns ``(kind, mlp, meta, stats)``; meta values are strings."""
    buf = Path(path).read_bytes()
    split = buf.find(b"\n\n")
    if split < 0:
        raise FormatError(f"{path}: model header has no terminating blank line")
    try:
        header = buf[:split].decode("utf-8").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not UTF-8") from exc
    offset = split + 2
    kind, layers_spec, meta, stats_spec = None, [], {}, None
    for line in header:
        key, _, rest = line.partition(" ")
        if key == "model":
            kind = rest
        elif key == "dense":
            n_in, n_out, act = rest.split()
            layers_spec.append((int(n_in), int(n_out), act))
        elif key == "stats":
            d, center = rest.split()
            stats_spec = (int(d), bool(int(center)))
        else:
            meta[key] = rest
    if kind is None or not layers_spec:
        raise FormatError(f"{path}: header lacks model kind or layers")
    layers = []
    for n_in, n_out, act in layers_spec:
        W, offset = unpack_fmat(buf, offset)
        b, offset = unpack_fmat(buf, offset)
        if W.shape != (n_out, n_in) or b.shape != (1, n_out):
            raise FormatError(f"{path}: layer blob shapes disagree with header")
        layers.append(DenseLayer(W, b.ravel(), act))
    stats = None
    if stats_spec is not None:
        S, offset = unpack_fmat(buf, offset)
        if S.shape != (2, stats_spec[0]):
            raise FormatError(f"{path}: stats blob has shape {S.shape}")
        stats = NormStats(S[0], S[1], stats_spec[1])
    if offset != len(buf):
        raise FormatError(f"{path}: trailing bytes after model payload")
    return kind, Mlp(layers), meta, stats


def write_stats(path, stats: NormStats) -> None:
    """NormStats as a 3 x D FMAT: mean, std, centring flag."""
    write_fmat(path, np.vstack([stats.mean, stats.std, np.full(stats.std.size, float(stats.center))]))


def read_stats(path) -> NormStats:
    m = read_fmat(path)
    if m.shape[0] != 3:
        raise FormatError(f"{path}: stats matrix must have 3 rows")
    return NormStats(m[0], m[1], bool(m[2, 0]) if m.shape[1] else True)


# --------------------------------------------------------------------------
# manifest and masks

SPLITS = ("train", "valid", "test")
MANIFEST_FIELDS = ("id", "audio", "motion", "mask", "split")


@dataclass
class ManifestEntry:
    id: str
    audio: Path  # .wav, or .fmat with pre-framed waveform
    motion: Path
    mask: Path | None
    split: str


@dataclass
class Manifest:
    entries: list
    root: Path

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    def __len__(self):
        return len(self.entries)


def read_manifest(path, check_files=True) -> Manifest:
    path = Path(path)
    root = path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS[:3] + ("split",)) - set(reader.fieldnames or [])
        if missing:
            raise FormatError(f"{path}: manifest lacks columns {sorted(missing)}")
        entries = []
        for row in reader:
            mask = row.get("mask") or ""
            entries.append(ManifestEntry(
                row["id"], root / row["audio"], root / row["motion"],
                root / mask if mask else None, row["split"].strip(),
            ))
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise DataError(f"{path}: duplicate utterance ids")
    for e in entries:
        if e.split not in SPLITS:
            raise DataError(f"{path}: utterance {e.id} has unknown split {e.split!r}")
        if check_files:
            for f in (e.audio, e.motion, e.mask):
                if f is not None and not f.exists():
                    raise DataError(f"{path}: file for utterance {e.id} not found: {f}")
    return Manifest(entries, root)


def write_manifest(path, entries) -> None:
    path = Path(path)
    root = path.parent
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write(",".join(MANIFEST_FIELDS) + "\n")
        for e in entries:
            rel = [os.path.relpath(p, root) if p is not None else "" for p in (e.audio, e.motion, e.mask)]
            fh.write(",".join([e.id, *[r.replace(os.sep, "/") for r in rel], e.split]) + "\n")


def write_mask_csv(path, mask, frame_rate=100.0) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("t,speaking\n")
        for i, v in enumerate(np.asarray(mask, dtype=bool)):
            fh.write(f"{repr(i / frame_rate)},{int(v)}\n")


def read_mask_csv(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or [h.strip() for h in rows[0][:2]] != ["t", "speaking"]:
        raise FormatError(f"{path}: mask CSV header must be t,speaking")
    try:
        return np.array([int(r[1]) != 0 for r in rows[1:] if r], dtype=bool)
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
