"""Manifests, binary matrix files, stratified splits and model-file persistence.

Two binary formats live here:

``FM01``
    ``b"FM01"`` magic, ``u32`` rows, ``u32`` cols, then ``rows * cols``
    little-endian float32 values in row-major order.

``AIM1``
    ``b"AIM1"`` magic, ``u16`` version, then a sequence of chunks, each a
    4-byte ASCII tag, a ``u64`` payload length and the payload.  Array
    chunks hold little-endian float64 values; their shapes are declared in
    the ``META`` chunk as ``<TAG>.shape=AxB`` entries.
"""
from __future__ import annotations

import json
import logging
import struct
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

log = logging.getLogger(__name__)

FM01_MAGIC = b"FM01"
AIM1_MAGIC = b"AIM1"
AIM1_VERSION = 1
VARIANCE_FLOOR = 1e-10

KINDS = ("accented", "native")
SPLITS = ("train", "dev", "test")


class ManifestError(ValueError):
    """Raised for malformed or inconsistent manifests."""


class FormatError(ValueError):
    """Raised when a binary file does not match its declared layout."""


@dataclass
class UtteranceRecord:
    utt_id: str
    speaker_id: str
    kind: str
    language: str
    split: str = "train"
    feature_path: str = ""
    strength: Optional[int] = None
    posterior_path: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ManifestError(f"{self.utt_id}: kind must be one of {KINDS}, got {self.kind!r}")
        if self.split not in SPLITS:
            raise ManifestError(f"{self.utt_id}: split must be one of {SPLITS}, got {self.split!r}")
        if self.strength is not None:
            if self.kind != "accented":
                raise ManifestError(f"{self.utt_id}: strength given for a native utterance")
            if self.strength not in (1, 2, 3, 4):
                raise ManifestError(f"{self.utt_id}: strength must be in 1..4, got {self.strength!r}")

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps({k: v for k, v in d.items() if v is not None}, sort_keys=True)


@dataclass
class FeatureSequence:
    frames: np.ndarray
    utt_id: str = ""

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def load_manifest(path) -> list[UtteranceRecord]:
    """Parse a JSON-lines manifest.

    Feature files are not checked for existence here; they are opened
    lazily by the consumers.
    """
    records = []
    seen = set()
    fields = set(UtteranceRecord.__dataclass_fields__)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(raw, dict):
                raise ManifestError(f"{path}:{lineno}: expected a JSON object")
            unknown = set(raw) - fields
            if unknown:
                raise ManifestError(f"{path}:{lineno}: unknown fields {sorted(unknown)}")
            try:
                rec = UtteranceRecord(**raw)
            except TypeError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from exc
            rec.validate()
            if rec.utt_id in seen:
                raise ManifestError(f"duplicate utt_id {rec.utt_id!r} at {path}:{lineno}")
            seen.add(rec.utt_id)
            records.append(rec)
    return records


def write_manifest(path, records: Iterable[UtteranceRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json() + "\n")


def resolve(base, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else Path(base) / p


def normalize_features(seq: FeatureSequence) -> FeatureSequence:
    """Per-utterance mean and variance normalization."""
    x = np.asarray(seq.frames, dtype=np.float64)
    mean = x.mean(axis=0)
    var = np.maximum(x.var(axis=0), VARIANCE_FLOOR)
    return FeatureSequence((x - mean) / np.sqrt(var), seq.utt_id)


def stratified_split(records, ratios=(0.6, 0.2, 0.2), seed: int = 0) -> list[UtteranceRecord]:
    """Assign train/dev/test within each (language, kind) stratum.

    Members of a stratum are ordered by ``utt_id`` before the seeded shuffle,
    so the result does not depend on input order.  Strata smaller than three
    utterances go entirely to train.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or min(ratios) <= 0 or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    strata = defaultdict(list)
    for rec in records:
        strata[(rec.language, rec.kind)].append(rec)
    assigned = {}
    for key in sorted(strata):
        members = sorted(strata[key], key=lambda r: r.utt_id)
        n = len(members)
        if n < 3:
            log.warning("stratum %s has %d utterances; all assigned to train", key, n)
            for rec in members:
                assigned[rec.utt_id] = "train"
            continue
        # per-stratum generator keyed on the stratum name keeps strata independent
        key_seed = int.from_bytes(f"{key[0]}\x00{key[1]}".encode(), "little") % (2**63)
        rng = np.random.default_rng([seed, key_seed])
        order = rng.permutation(n)
        n_train = int(round(ratios[0] * n))
        n_dev = int(round(ratios[1] * n))
        n_train = min(max(n_train, 1), n - 2)
        n_dev = min(max(n_dev, 1), n - n_train - 1)
        for rank, idx in enumerate(order):
            split = "train" if rank < n_train else "dev" if rank < n_train + n_dev else "test"
            assigned[members[idx].utt_id] = split
    out = []
    for rec in records:
        d = asdict(rec)
        d["split"] = assigned[rec.utt_id]
        out.append(UtteranceRecord(**d))
    return out


# ---------------------------------------------------------------------------
# FM01 matrices

def write_matrix(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise FormatError(f"FM01 holds 2-D matrices, got shape {m.shape}")
    rows, cols = m.shape
    with open(path, "wb") as fh:
        fh.write(FM01_MAGIC)
        fh.write(struct.pack("<II", rows, cols))
        fh.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    """Read an FM01 file into a float64 array."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != FM01_MAGIC:
        raise FormatError(f"{path}: not an FM01 file")
    rows, cols = struct.unpack_from("<II", data, 4)
    expected = rows * cols * 4
    if len(data) - 12 != expected:
        raise FormatError(f"{path}: payload is {len(data) - 12} bytes, header implies {expected}")
    return np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float64)


def write_ivectors(path, ids, vectors) -> Path:
    """Write an utterance x M FM01 matrix plus a ``.ids`` sidecar (one utt_id per line)."""
    path = Path(path)
    vectors = np.asarray(vectors)
    if len(ids) != vectors.shape[0]:
        raise FormatError("id list and i-vector rows disagree")
    write_matrix(path, vectors)
    sidecar = path.with_name(path.name + ".ids")
    sidecar.write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    return sidecar


def read_ivectors(path) -> tuple[list[str], np.ndarray]:
    path = Path(path)
    vectors = read_matrix(path)
    ids = path.with_name(path.name + ".ids").read_text(encoding="utf-8").split()
    if len(ids) != vectors.shape[0]:
        raise FormatError(f"{path}: {vectors.shape[0]} rows but {len(ids)} ids")
    return ids, vectors


# ---------------------------------------------------------------------------
# AIM1 model files

@dataclass
class ModelFile:
    """In-memory view of an AIM1 file: named arrays plus string metadata."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)
    version: int = AIM1_VERSION

    def __getitem__(self, tag: str) -> np.ndarray:
        return self.arrays[tag]

    def __setitem__(self, tag: str, value) -> None:
        if len(tag.encode("ascii")) != 4 or tag == "META":
            raise FormatError(f"chunk tag must be 4 ASCII characters other than META, got {tag!r}")
        self.arrays[tag] = np.asarray(value, dtype=np.float64)


def _encode_meta(meta: dict) -> bytes:
    lines = []
    for key in sorted(meta):
        value = str(meta[key])
        if "\n" in value or "=" in key or "\n" in key:
            raise FormatError(f"META entry {key!r} contains a reserved character")
        lines.append(f"{key}={value}")
    return "\n".join(lines).encode("utf-8")


def _decode_meta(payload: bytes) -> dict[str, str]:
    meta = {}
    for line in payload.decode("utf-8").splitlines():
        if line:
            key, _, value = line.partition("=")
            meta[key] = value
    return meta


def save_model(path, model: ModelFile) -> None:
    meta = {k: v for k, v in model.meta.items() if not k.endswith(".shape")}
    for tag, arr in model.arrays.items():
        meta[f"{tag}.shape"] = "x".join(str(d) for d in arr.shape)
    chunks = [("META", _encode_meta(meta))]
    for tag in sorted(model.arrays):
        chunks.append((tag, np.ascontiguousarray(model.arrays[tag], dtype="<f8").tobytes()))
    with open(path, "wb") as fh:
        fh.write(AIM1_MAGIC)
        fh.write(struct.pack("<H", model.version))
        for tag, payload in chunks:
            fh.write(tag.encode("ascii"))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_model(path) -> ModelFile:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 6 or data[:4] != AIM1_MAGIC:
        raise FormatError(f"{path}: not an AIM1 file")
    (version,) = struct.unpack_from("<H", data, 4)
    pos = 6
    raw = {}
    while pos < len(data):
        if pos + 12 > len(data):
            raise FormatError(f"{path}: truncated chunk header at byte {pos}")
        tag = data[pos:pos + 4].decode("ascii")
        (length,) = struct.unpack_from("<Q", data, pos + 4)
        pos += 12
        if pos + length > len(data):
            raise FormatError(f"{path}: chunk {tag} overruns the file")
        raw[tag] = data[pos:pos + length]
        pos += length
    meta = _decode_meta(raw.pop("META", b""))
    model = ModelFile(meta=meta, version=version)
    for tag, payload in raw.items():
        shape_txt = meta.get(f"{tag}.shape")
        if shape_txt is None:
            log.debug("skipping undeclared chunk %s", tag)
            continue
        shape = tuple(int(d) for d in shape_txt.split("x")) if shape_txt else ()
        if len(payload) != 8 * int(np.prod(shape, dtype=np.int64)):
            raise FormatError(f"{path}: chunk {tag} has {len(payload)} bytes, META declares {shape}")
        model.arrays[tag] = np.frombuffer(payload, dtype="<f8").reshape(shape).astype(np.float64)
    return model
