"""File formats and the synthetic gallery generator.

Embedding files (``BEMB``) hold little-endian records of
``(u64 subject_id, u64 sample_id, dim x f32)`` after a 16-byte header.
Per-record metadata lives in a JSON-lines sidecar at ``<path>.meta``.
Index files (``BIDX``) store a forest depth-first with length-prefixed
nodes; protected indexes carry ciphertexts instead of vectors.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    RACE_VOCAB,
    SEX_VOCAB,
    CascadeSchedule,
    SoftBiometrics,
    Split,
    SubjectRecord,
)
from .fusion import FusionMethod, TrainingStats
from .index import IndexForest
from .pairing import PairingMethod
from .protection import Encoder, ProtectedIndex, ProtectedTemplate, QuantizationParams, Scheme


class FormatError(ValueError):
    pass


EMB_MAGIC = b"BEMB"
IDX_MAGIC = b"BIDX"
VERSION = 1


@dataclass(frozen=True)
class EmbeddingFileHeader:
    record_count: int
    dim: int
    magic: bytes = EMB_MAGIC
    version: int = VERSION
    reserved: int = 0

    FORMAT = struct.Struct("<4sHHII")

    def encode(self) -> bytes:
        return self.FORMAT.pack(self.magic, self.version, self.reserved, self.record_count,
                                self.dim)

    @classmethod
    def decode(cls, data: bytes) -> EmbeddingFileHeader:
        if len(data) < cls.FORMAT.size:
            raise FormatError("truncated file: header incomplete")
        magic, version, reserved, count, dim = cls.FORMAT.unpack_from(data)
        if magic != EMB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {EMB_MAGIC!r}")
        if version != VERSION:
            raise FormatError(f"version mismatch: file has {version}, reader supports {VERSION}")
        if count < 1 or dim < 1:
            raise FormatError("header declares an empty file")
        return cls(count, dim, magic, version, reserved)


def meta_path(path) -> Path:
    return Path(str(path) + ".meta")


def _record_dtype(dim: int) -> np.dtype:
    return np.dtype([("subject", "<u8"), ("sample", "<u8"), ("values", "<f4", (dim,))])


def atomic_write(path, data: bytes) -> None:
    """Write ``data`` to a temp file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _meta_line(r: SubjectRecord) -> str:
    soft = r.soft
    return json.dumps({
        "subject_id": r.subject_id,
        "sample_id": r.sample_id,
        "sex": soft.sex if soft else None,
        "race": soft.race if soft else None,
        "age": soft.age if soft else None,
        "split": r.split.value,
    }, sort_keys=True)


def write_embeddings(records: Sequence[SubjectRecord], path) -> None:
    if not records:
        raise FormatError("refusing to write an empty embedding file")
    dim = records[0].dim
    if any(r.dim != dim for r in records):
        raise FormatError("records differ in dimension")
    body = np.empty(len(records), dtype=_record_dtype(dim))
    body["subject"] = [r.subject_id for r in records]
    body["sample"] = [r.sample_id for r in records]
    body["values"] = np.stack([r.embedding for r in records])
    atomic_write(path, EmbeddingFileHeader(len(records), dim).encode() + body.tobytes())
    atomic_write(meta_path(path), "".join(_meta_line(r) + "\n" for r in records).encode())


def _read_meta(path) -> dict[tuple[int, int], dict]:
    mpath = meta_path(path)
    if not mpath.exists():
        raise FormatError(f"metadata sidecar missing: {mpath}")
    meta = {}
    with open(mpath, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                meta[(int(row["subject_id"]), int(row["sample_id"]))] = row
            except (ValueError, KeyError) as exc:
                raise FormatError(f"{mpath}:{lineno}: bad metadata line ({exc})") from exc
    return meta


def read_embeddings(path) -> list[SubjectRecord]:
    data = Path(path).read_bytes()
    header = EmbeddingFileHeader.decode(data)
    dtype = _record_dtype(header.dim)
    expected = header.FORMAT.size + header.record_count * dtype.itemsize
    if len(data) < expected:
        raise FormatError(f"truncated file: {len(data)} bytes, expected {expected}")
    if len(data) > expected:
        raise FormatError(f"trailing data: {len(data)} bytes, expected {expected}")
    body = np.frombuffer(data, dtype=dtype, count=header.record_count, offset=header.FORMAT.size)
    meta = _read_meta(path)
    records = []
    for row in body:
        key = (int(row["subject"]), int(row["sample"]))
        m = meta.get(key)
        if m is None:
            raise FormatError(f"metadata join miss for subject={key[0]} sample={key[1]}")
        soft = None
        if m.get("sex") is not None:
            soft = SoftBiometrics(m["sex"], m["race"], int(m["age"]))
        records.append(SubjectRecord(key[0], key[1], row["values"], Split(m["split"]), soft))
    return records


# -- index files -----------------------------------------------------------------

_IDX_HEAD = struct.Struct("<4sHHIIBBBBI")
_FLAG_PROTECTED = 1
_FLAG_STATS = 2
_FLAG_SCHEDULE = 4
_FLAG_TRUNCATE = 8
_FLAG_QUANT = 16
_PAIRING_IDS = {PairingMethod.RANDOM: 0, PairingMethod.SOFT_BIOMETRIC: 1,
                PairingMethod.SIMILARITY_SCORE: 2}
_NODE_HEAD = struct.Struct("<BB")


def _index_bytes(forest: IndexForest | ProtectedIndex,
                 schedule: CascadeSchedule | None) -> bytes:
    protected = isinstance(forest, ProtectedIndex)
    quant = None
    if protected:
        encoder = forest.encoder
        stats = encoder.stats if encoder is not None else None
        quant = encoder.quant if encoder is not None else None
    else:
        stats = forest.stats
    flags = (_FLAG_PROTECTED if protected else 0) | (_FLAG_STATS if stats is not None else 0)
    flags |= _FLAG_QUANT if quant is not None else 0
    if schedule is not None:
        flags |= _FLAG_SCHEDULE | (_FLAG_TRUNCATE if schedule.truncate_final else 0)
    pairing = PairingMethod(forest.pairing)
    scheme = forest.scheme if protected else 0
    out = io.BytesIO()
    out.write(_IDX_HEAD.pack(IDX_MAGIC, VERSION, flags, forest.n1, forest.dim, int(forest.fusion),
                             _PAIRING_IDS[pairing], int(scheme), 0, len(forest.levels[0])))
    if schedule is not None:
        out.write(struct.pack(f"<I{len(schedule.selections)}I", len(schedule.selections),
                              *schedule.selections))
    key_id = bytes.fromhex(forest.key_id) if protected else b""
    out.write(struct.pack("<H", len(key_id)) + key_id)
    if stats is not None:
        out.write(struct.pack("<Q", stats.source_count))
        out.write(stats.mu.astype("<f8").tobytes())
    if quant is not None:
        out.write(struct.pack("<B", quant.bits))
        out.write(quant.lo.astype("<f8").tobytes() + quant.hi.astype("<f8").tobytes())

    last = len(forest.levels) - 1

    def node(depth: int, j: int) -> None:
        leaf = depth == last
        body = _NODE_HEAD.pack(depth + 1, int(leaf))
        if leaf:
            body += struct.pack("<Q", int(forest.leaf_subjects[j]))
        item = forest.levels[depth][j]
        body += item.to_bytes() if protected else np.asarray(item, "<f8").tobytes()
        out.write(struct.pack("<I", len(body)) + body)
        if not leaf:
            node(depth + 1, 2 * j)
            node(depth + 1, 2 * j + 1)

    for t in range(len(forest.levels[0])):
        node(0, t)
    return out.getvalue()


def write_index(forest: IndexForest | ProtectedIndex, path,
                schedule: CascadeSchedule | None = None) -> None:
    atomic_write(path, _index_bytes(forest, schedule))


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated index file")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str | struct.Struct):
        s = fmt if isinstance(fmt, struct.Struct) else struct.Struct(fmt)
        return s.unpack(self.take(s.size))


@dataclass
class IndexFile:
    index: IndexForest | ProtectedIndex
    schedule: CascadeSchedule | None = None
    protected: bool = field(init=False)

    def __post_init__(self) -> None:
        self.protected = isinstance(self.index, ProtectedIndex)


def read_index_file(path) -> IndexFile:
    cur = _Cursor(Path(path).read_bytes())
    if len(cur.data) < _IDX_HEAD.size:
        raise FormatError("truncated index file")
    (magic, version, flags, n1, dim, fusion, pairing_id, scheme, _, trees) = cur.unpack(_IDX_HEAD)
    if magic != IDX_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {IDX_MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"version mismatch: file has {version}, reader supports {VERSION}")
    if n1 < 2 or n1 & (n1 - 1) or trees < 1 or dim < 1:
        raise FormatError("corrupt index header")
    try:
        pairing = next(p for p, i in _PAIRING_IDS.items() if i == pairing_id)
        fusion = FusionMethod(fusion)
    except (StopIteration, ValueError) as exc:
        raise FormatError("corrupt index header") from exc
    schedule = None
    if flags & _FLAG_SCHEDULE:
        (count,) = cur.unpack("<I")
        sel = cur.unpack(f"<{count}I")
        schedule = CascadeSchedule(n1, sel, bool(flags & _FLAG_TRUNCATE))
    (klen,) = cur.unpack("<H")
    key_id = cur.take(klen).hex()
    stats = None
    if flags & _FLAG_STATS:
        (count,) = cur.unpack("<Q")
        stats = TrainingStats(np.frombuffer(cur.take(8 * dim), "<f8").astype(np.float64), count)
    quant = None
    if flags & _FLAG_QUANT:
        (bits,) = cur.unpack("<B")
        lo = np.frombuffer(cur.take(8 * dim), "<f8")
        hi = np.frombuffer(cur.take(8 * dim), "<f8")
        quant = QuantizationParams(lo, hi, bits)
    protected = bool(flags & _FLAG_PROTECTED)

    n_levels = n1.bit_length()
    levels: list[list] = [[None] * (trees << d) for d in range(n_levels)]
    subjects = np.zeros(trees * n1, dtype=np.uint64)

    def node(depth: int, j: int) -> None:
        (size,) = cur.unpack("<I")
        body = _Cursor(cur.take(size))
        level, is_leaf = body.unpack(_NODE_HEAD)
        if level != depth + 1 or bool(is_leaf) != (depth == n_levels - 1):
            raise FormatError(f"corrupt node at level {depth + 1}")
        if is_leaf:
            (subjects[j],) = body.unpack("<Q")
        rest = body.data[body.pos:]
        if protected:
            levels[depth][j] = ProtectedTemplate.from_bytes(rest)
        else:
            if len(rest) != 8 * dim:
                raise FormatError("node payload size mismatch")
            levels[depth][j] = np.frombuffer(rest, "<f8")
        if not is_leaf:
            node(depth + 1, 2 * j)
            node(depth + 1, 2 * j + 1)

    for t in range(trees):
        node(0, t)
    if cur.pos != len(cur.data):
        raise FormatError("trailing data after index")

    if protected:
        index = ProtectedIndex(n1, dim, int(fusion), pairing.value,
                               tuple(tuple(level) for level in levels), subjects,
                               Scheme(scheme), key_id,
                               Encoder(Scheme(scheme), quant, stats))
    else:
        arrays = tuple(np.stack(level).astype(np.float64) for level in levels)
        index = IndexForest(n1, fusion, arrays, subjects, stats, pairing)
    return IndexFile(index, schedule)


def read_index(path) -> IndexForest | ProtectedIndex:
    return read_index_file(path).index


# -- synthetic data --------------------------------------------------------------


@dataclass(frozen=True)
class SplitProportions:
    """Partition sizes relative to the enrolled subject count.

    Defaults mirror a gallery of 4096 enrolled subjects with 12939 mated
    probe samples, and 1935 non-enrolled subjects with 7123 probe samples.
    The training split size is not tied to any published figure.
    """

    enrolled_probes_per_subject: float = 12939 / 4096
    nonenrolled_subject_ratio: float = 1935 / 4096
    nonenrolled_probes_per_subject: float = 7123 / 1935
    train_subject_ratio: float = 0.25


@dataclass(frozen=True)
class SyntheticModel:
    num_subjects: int
    dim: int = 512
    intra_class_sigma: float = 0.1
    seed: int = 0
    samples_per_subject: int | None = None
    split_proportions: SplitProportions = SplitProportions()
    age_range: tuple[int, int] = (16, 77)

    def __post_init__(self) -> None:
        if self.num_subjects < 1 or self.dim < 1:
            raise ValueError("num_subjects and dim must be positive")
        if not self.intra_class_sigma >= 0:
            raise ValueError("intra_class_sigma must be non-negative")
        if self.samples_per_subject is not None and self.samples_per_subject < 1:
            raise ValueError("samples_per_subject must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def _spread(total: int, n: int, rng: np.random.Generator) -> np.ndarray:
    """Split ``total`` samples over ``n`` subjects as evenly as possible."""
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    counts = np.full(n, total // n, dtype=np.int64)
    counts[rng.permutation(n)[: total % n]] += 1
    return counts


def _normalize_rows(x: np.ndarray) -> np.ndarray:
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def generate_synthetic(model: SyntheticModel) -> list[SubjectRecord]:
    """Draw a labelled gallery: unit-sphere centroids plus Gaussian intra-class noise."""
    p = model.split_proportions
    n = model.num_subjects
    n_non = int(round(n * p.nonenrolled_subject_ratio))
    n_train = int(round(n * p.train_subject_ratio))
    total = n + n_non + n_train

    root = np.random.SeedSequence(model.seed)
    emb_seq, count_seq, soft_seq = root.spawn(3)
    emb_rng = np.random.default_rng(emb_seq)
    count_rng = np.random.default_rng(count_seq)
    soft_rng = np.random.default_rng(soft_seq)

    if model.samples_per_subject is not None:
        k = model.samples_per_subject
        probes = np.full(n, k - 1, dtype=np.int64)
        non = np.full(n_non, k, dtype=np.int64)
        train = np.full(n_train, k, dtype=np.int64)
    else:
        probes = _spread(int(round(n * p.enrolled_probes_per_subject)), n, count_rng)
        non = _spread(int(round(n_non * p.nonenrolled_probes_per_subject)), n_non, count_rng)
        train = np.ones(n_train, dtype=np.int64)

    centroids = _normalize_rows(emb_rng.standard_normal((total, model.dim)))
    lo, hi = model.age_range
    soft = [
        SoftBiometrics(SEX_VOCAB[s], RACE_VOCAB[r], int(a))
        for s, r, a in zip(
            soft_rng.integers(0, len(SEX_VOCAB), total),
            soft_rng.integers(0, len(RACE_VOCAB), total),
            soft_rng.integers(lo, hi + 1, total),
        )
    ]

    plan: list[tuple[int, Split]] = []  # (subject index, split) per sample
    plan += [(i, Split.REFERENCE) for i in range(n)]
    plan += [(i, Split.PROBE_ENROLLED) for i in range(n) for _ in range(probes[i])]
    plan += [(n + i, Split.PROBE_NONENROLLED) for i in range(n_non) for _ in range(non[i])]
    plan += [(n + n_non + i, Split.TRAIN) for i in range(n_train) for _ in range(train[i])]

    owners = np.array([s for s, _ in plan], dtype=np.int64)
    noise = emb_rng.standard_normal((len(plan), model.dim)) * model.intra_class_sigma
    samples = _normalize_rows(centroids[owners] + noise)
    return [
        SubjectRecord(int(s), k, samples[k], split, soft[s])
        for k, (s, split) in enumerate(plan)
    ]


def split_records(records: Iterable[SubjectRecord]) -> dict[Split, list[SubjectRecord]]:
    out: dict[Split, list[SubjectRecord]] = {s: [] for s in Split}
    for r in records:
        out[r.split].append(r)
    return out
