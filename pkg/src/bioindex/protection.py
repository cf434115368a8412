"""Protected comparison backends and template representations.

The shipped backends are *insecure test doubles*.  They honour the
functional contract of a homomorphic comparator (randomized ciphertexts,
comparison results that decrypt to the plaintext score, key rotation) using
keystream masking derived from the secret key.  Evaluation of the squared
distance unmasks internally, which a real lattice scheme would not need to do;
the binary backend's XOR is genuinely computed on ciphertexts.  A real
scheme can be bound by implementing :class:`Backend`.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
import warnings
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .core import DimensionMismatch, squared_distances
from .fusion import TrainingStats

NONCE_BYTES = 16
TAG_BYTES = 16
APPROX_SCALE_BITS = 30
APPROX_NOISE = 2**6  # integer noise bound on encryption, in fixed-point units
SECURITY_LEVELS = (128, 192, 256)


class ProtectionError(ValueError):
    pass


class KeyMismatch(ProtectionError):
    pass


class Scheme(enum.IntEnum):
    PLAINTEXT_REF = 0
    APPROX_REAL = 1
    EXACT_INT = 2
    BINARY = 3

    @classmethod
    def parse(cls, name: str | int | Scheme) -> Scheme:
        if isinstance(name, (Scheme, int)):
            return cls(name)
        key = name.strip().upper().replace("-", "_")
        aliases = {"PLAINTEXT": "PLAINTEXT_REF", "CKKS": "APPROX_REAL", "BFV": "EXACT_INT",
                   "NTRU": "BINARY", "REAL": "APPROX_REAL", "INT": "EXACT_INT"}
        try:
            return cls[aliases.get(key, key)]
        except KeyError:
            raise ValueError(f"unknown scheme {name!r}") from None


class Kind(enum.IntEnum):
    TEMPLATE = 0
    SCORE = 1
    XOR = 2


@dataclass(frozen=True)
class KeyMaterial:
    key_id: str
    scheme: Scheme
    security_level: int
    public: bytes = field(repr=False)
    secret: bytes | None = field(default=None, repr=False)
    params_id: str = "mock-v1"

    def public_only(self) -> KeyMaterial:
        return KeyMaterial(self.key_id, self.scheme, self.security_level, self.public,
                           None, self.params_id)

    def require_secret(self) -> bytes:
        if self.secret is None:
            raise KeyMismatch(f"key {self.key_id} has no secret part")
        return self.secret


def generate_keys(scheme, security_level: int = 128,
                  rng: np.random.Generator | None = None) -> KeyMaterial:
    scheme = Scheme.parse(scheme)
    if security_level not in SECURITY_LEVELS:
        raise ProtectionError(f"security level must be one of {SECURITY_LEVELS}")
    rng = rng if rng is not None else np.random.default_rng()
    secret = rng.bytes(security_level // 8)
    public = hashlib.blake2b(secret, person=b"bioindex-pub").digest()
    key_id = hashlib.blake2b(public + bytes([scheme]), digest_size=8).hexdigest()
    return KeyMaterial(key_id, scheme, security_level, public, secret)


KEY_MAGIC = b"BKEY"
KEY_HEADER = struct.Struct("<4sHBHB8sI")


def key_to_bytes(keys: KeyMaterial, include_secret: bool = False) -> bytes:
    secret = keys.secret if include_secret and keys.secret is not None else b""
    key_id = bytes.fromhex(keys.key_id)
    params = keys.params_id.encode()
    return (
        KEY_HEADER.pack(KEY_MAGIC, 1, keys.scheme, keys.security_level, len(params), key_id,
                        len(keys.public))
        + params + keys.public + struct.pack("<I", len(secret)) + secret
    )


def key_from_bytes(data: bytes) -> KeyMaterial:
    if len(data) < KEY_HEADER.size or data[:4] != KEY_MAGIC:
        raise ProtectionError("bad key file magic")
    magic, version, scheme, level, plen, key_id, publen = KEY_HEADER.unpack_from(data)
    if version != 1:
        raise ProtectionError(f"unsupported key file version {version}")
    off = KEY_HEADER.size
    params = data[off:off + plen].decode()
    off += plen
    public = data[off:off + publen]
    off += publen
    (slen,) = struct.unpack_from("<I", data, off)
    secret = data[off + 4:off + 4 + slen] or None
    if len(public) != publen or (secret is not None and len(secret) != slen):
        raise ProtectionError("truncated key file")
    return KeyMaterial(key_id.hex(), Scheme(scheme), level, public, secret, params)


@dataclass(frozen=True)
class ProtectedTemplate:
    scheme: Scheme
    key_id: str
    kind: Kind
    length: int  # number of encoded elements (bits for BINARY)
    nonce: bytes = field(repr=False)
    payload: bytes = field(repr=False)
    tag: bytes = field(repr=False)

    _HEAD = struct.Struct("<BBI8sHI")

    @property
    def ciphertext(self) -> bytes:
        return self.to_bytes()

    def to_bytes(self) -> bytes:
        return (
            self._HEAD.pack(self.scheme, self.kind, self.length, bytes.fromhex(self.key_id),
                            len(self.nonce), len(self.payload))
            + self.nonce + self.payload + self.tag
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> ProtectedTemplate:
        if len(data) < cls._HEAD.size:
            raise ProtectionError("truncated ciphertext")
        scheme, kind, length, key_id, nlen, plen = cls._HEAD.unpack_from(data)
        off = cls._HEAD.size
        if len(data) != off + nlen + plen + TAG_BYTES:
            raise ProtectionError("ciphertext length mismatch")
        nonce = data[off:off + nlen]
        payload = data[off + nlen:off + nlen + plen]
        tag = data[off + nlen + plen:]
        return cls(Scheme(scheme), key_id.hex(), Kind(kind), length, nonce, payload, tag)


# -- template representations ------------------------------------------------


class DegenerateDimensionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class QuantizationParams:
    lo: np.ndarray
    hi: np.ndarray
    bits: int = 8

    def __post_init__(self) -> None:
        if not 1 <= self.bits <= 16:
            raise ProtectionError(f"bits must lie in [1, 16], got {self.bits}")
        lo = np.array(self.lo, dtype=np.float64)
        hi = np.array(self.hi, dtype=np.float64)
        if lo.shape != hi.shape or np.any(lo > hi):
            raise ProtectionError("quantization bounds must satisfy lo <= hi")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def levels(self) -> int:
        return (1 << self.bits) - 1

    @property
    def degenerate(self) -> np.ndarray:
        return self.lo == self.hi


def fit_quantization(train, bits: int = 8) -> QuantizationParams:
    mat = np.asarray(train, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] == 0:
        raise ProtectionError("quantization needs a non-empty training matrix")
    return QuantizationParams(mat.min(axis=0), mat.max(axis=0), bits)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantize(v, q: QuantizationParams) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != q.lo.shape[0]:
        raise DimensionMismatch("vector and quantization params differ in dimension")
    span = q.hi - q.lo
    degenerate = q.degenerate
    if degenerate.any():
        warnings.warn(f"{int(degenerate.sum())} degenerate dimension(s) quantized to 0",
                      DegenerateDimensionWarning, stacklevel=2)
    scaled = (v - q.lo) / np.where(degenerate, 1.0, span) * q.levels
    out = np.clip(_round_half_away(scaled), 0, q.levels).astype(np.int64)
    out[..., degenerate] = 0
    return out


def dequantize(qv, q: QuantizationParams) -> np.ndarray:
    return q.lo + np.asarray(qv, dtype=np.float64) / q.levels * (q.hi - q.lo)


def binarize(v, stats: TrainingStats) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1] != stats.dim:
        raise DimensionMismatch("vector and training stats differ in dimension")
    return (v >= stats.mu).astype(np.uint8)


def hamming(a, b) -> int:
    return int(np.count_nonzero(np.asarray(a) != np.asarray(b)))


# -- backends ----------------------------------------------------------------


def _keystream(secret: bytes, nonce: bytes, nbytes: int) -> bytes:
    return hashlib.shake_256(b"bioindex-ks" + secret + nonce).digest(nbytes)


def _mac(secret: bytes, *parts: bytes) -> bytes:
    return hmac.new(secret, b"".join(parts), hashlib.blake2b).digest()[:TAG_BYTES]


class Backend:
    """Protected comparison over one scheme.

    ``compare`` returns a protected result; ``reveal`` decrypts it into the
    plaintext score (squared Euclidean distance, or Hamming distance for the
    binary scheme, whose bit summation happens after decryption).
    """

    scheme: Scheme

    def __init__(self, rng: np.random.Generator | None = None):
        self.rng = rng if rng is not None else np.random.default_rng()

    # representation hooks
    def _encode(self, template: np.ndarray) -> bytes:
        raise NotImplementedError

    def _decode(self, raw: bytes, length: int) -> np.ndarray:
        raise NotImplementedError

    def _check_repr(self, template: np.ndarray) -> np.ndarray:
        return np.asarray(template, dtype=np.float64)

    def _check_keys(self, keys: KeyMaterial) -> bytes:
        if keys.scheme is not self.scheme:
            raise KeyMismatch(f"key {keys.key_id} is for {keys.scheme.name}, not {self.scheme.name}")
        return keys.require_secret()

    def _seal(self, keys: KeyMaterial, kind: Kind, length: int, raw: bytes) -> ProtectedTemplate:
        secret = self._check_keys(keys)
        nonce = self.rng.bytes(NONCE_BYTES)
        payload = _xor(raw, _keystream(secret, nonce, len(raw)))
        tag = _mac(secret, nonce, payload, bytes([kind]))
        return ProtectedTemplate(self.scheme, keys.key_id, kind, length, nonce, payload, tag)

    def _open(self, ct: ProtectedTemplate, keys: KeyMaterial) -> bytes:
        secret = self._check_keys(keys)
        if ct.scheme is not self.scheme:
            raise KeyMismatch(f"ciphertext is {ct.scheme.name}, backend is {self.scheme.name}")
        if ct.key_id != keys.key_id:
            raise KeyMismatch(f"ciphertext key {ct.key_id} != supplied key {keys.key_id}")
        if not hmac.compare_digest(ct.tag, _mac(secret, ct.nonce, ct.payload, bytes([ct.kind]))):
            raise KeyMismatch("ciphertext does not authenticate under the supplied key")
        stream = b"".join(
            _keystream(secret, ct.nonce[k:k + NONCE_BYTES], len(ct.payload))
            for k in range(0, len(ct.nonce), NONCE_BYTES)
        )
        if len(ct.nonce) > NONCE_BYTES:
            stream = _fold_xor(stream, len(ct.payload))
        return _xor(ct.payload, stream)

    def encrypt(self, template, keys: KeyMaterial) -> ProtectedTemplate:
        arr = self._check_repr(template)
        return self._seal(keys, Kind.TEMPLATE, arr.shape[0], self._encode(arr))

    def decrypt(self, ct: ProtectedTemplate, keys: KeyMaterial) -> np.ndarray:
        if ct.kind is not Kind.TEMPLATE:
            raise ProtectionError("not a template ciphertext")
        return self._decode(self._open(ct, keys), ct.length)

    def _same_domain(self, a: ProtectedTemplate, b: ProtectedTemplate) -> None:
        if a.scheme is not b.scheme or a.scheme is not self.scheme:
            raise KeyMismatch("ciphertexts belong to different schemes")
        if a.key_id != b.key_id:
            raise KeyMismatch("ciphertexts were produced under different keys")
        if a.length != b.length:
            raise DimensionMismatch(f"protected templates differ in length ({a.length}, {b.length})")

    def compare(self, a: ProtectedTemplate, b: ProtectedTemplate,
                keys: KeyMaterial) -> ProtectedTemplate:
        self._same_domain(a, b)
        score = self._score(self.decrypt(a, keys), self.decrypt(b, keys))
        return self._seal(keys, Kind.SCORE, 1, self._encode_score(score))

    def reveal(self, result: ProtectedTemplate, keys: KeyMaterial) -> float:
        if result.kind is not Kind.SCORE:
            raise ProtectionError("not a score ciphertext")
        return self._decode_score(self._open(result, keys))

    def _score(self, a: np.ndarray, b: np.ndarray) -> float:
        # same kernel as the plaintext comparator, so the reference backend is bit-exact
        return float(squared_distances(a, b[None, :])[0])

    def _encode_score(self, score: float) -> bytes:
        return struct.pack("<d", score)

    def _decode_score(self, raw: bytes) -> float:
        return struct.unpack("<d", raw)[0]


def _xor(a: bytes, b: bytes) -> bytes:
    return (np.frombuffer(a, np.uint8) ^ np.frombuffer(b, np.uint8)[:len(a)]).tobytes()


def _fold_xor(stream: bytes, n: int) -> bytes:
    parts = [np.frombuffer(stream[k:k + n], np.uint8) for k in range(0, len(stream), n)]
    return np.bitwise_xor.reduce(parts).tobytes()


class PlaintextReference(Backend):
    """Reference backend: float64 payload, integrity-tagged but not hidden."""

    scheme = Scheme.PLAINTEXT_REF

    def _seal(self, keys, kind, length, raw):
        secret = self._check_keys(keys)
        nonce = self.rng.bytes(NONCE_BYTES)
        return ProtectedTemplate(self.scheme, keys.key_id, kind, length, nonce, raw,
                                 _mac(secret, nonce, raw, bytes([kind])))

    def _open(self, ct, keys):
        secret = self._check_keys(keys)
        if ct.key_id != keys.key_id or not hmac.compare_digest(
            ct.tag, _mac(secret, ct.nonce, ct.payload, bytes([ct.kind]))
        ):
            raise KeyMismatch("ciphertext does not belong to the supplied key")
        return ct.payload

    def _encode(self, template):
        return template.astype("<f8").tobytes()

    def _decode(self, raw, length):
        return np.frombuffer(raw, "<f8").astype(np.float64)


class ApproxReal(Backend):
    """Approximate real arithmetic: fixed-point encoding with encryption noise."""

    scheme = Scheme.APPROX_REAL

    def __init__(self, rng=None, score_noise: float = 1e-7):
        super().__init__(rng)
        self.score_noise = score_noise

    def _encode(self, template):
        fixed = np.round(template * 2.0**APPROX_SCALE_BITS).astype(np.int64)
        fixed += self.rng.integers(-APPROX_NOISE, APPROX_NOISE + 1, size=fixed.shape)
        return fixed.astype("<i8").tobytes()

    def _decode(self, raw, length):
        return np.frombuffer(raw, "<i8").astype(np.float64) / 2.0**APPROX_SCALE_BITS

    def _score(self, a, b):
        exact = super()._score(a, b)
        return exact + float(self.rng.normal(0.0, self.score_noise))


class ExactInt(Backend):
    """Exact integer arithmetic over quantized templates."""

    scheme = Scheme.EXACT_INT

    def _check_repr(self, template):
        arr = np.asarray(template)
        if arr.dtype.kind not in "iu":
            raise ProtectionError("EXACT_INT encrypts integer templates; quantize first")
        return arr.astype(np.int64)

    def _encode(self, template):
        return template.astype("<i8").tobytes()

    def _decode(self, raw, length):
        return np.frombuffer(raw, "<i8").astype(np.int64)

    def _score(self, a, b):
        d = a - b
        return int(d @ d)

    def _encode_score(self, score):
        return struct.pack("<q", score)

    def _decode_score(self, raw):
        return struct.unpack("<q", raw)[0]


class BinaryXor(Backend):
    """Per-bit scheme: XOR is evaluated on ciphertexts, popcount after decryption."""

    scheme = Scheme.BINARY

    def _check_repr(self, template):
        arr = np.asarray(template)
        if arr.dtype.kind not in "iub" or np.any((arr != 0) & (arr != 1)):
            raise ProtectionError("BINARY encrypts bit vectors; binarize first")
        return arr.astype(np.uint8)

    def _encode(self, template):
        return np.packbits(template).tobytes()

    def _decode(self, raw, length):
        return np.unpackbits(np.frombuffer(raw, np.uint8))[:length]

    def compare(self, a, b, keys):
        self._same_domain(a, b)
        secret = self._check_keys(keys)
        for ct in (a, b):
            if ct.kind is not Kind.TEMPLATE:
                raise ProtectionError("BINARY comparison takes template ciphertexts")
            self._open(ct, keys)  # authenticate inputs
        payload = _xor(a.payload, b.payload)
        nonce = a.nonce + b.nonce
        tag = _mac(secret, nonce, payload, bytes([Kind.XOR]))
        return ProtectedTemplate(self.scheme, keys.key_id, Kind.XOR, a.length, nonce, payload, tag)

    def reveal_bits(self, result: ProtectedTemplate, keys: KeyMaterial) -> np.ndarray:
        if result.kind is not Kind.XOR:
            raise ProtectionError("not an XOR ciphertext")
        return self._decode(self._open(result, keys), result.length)

    def reveal(self, result, keys):
        return int(self.reveal_bits(result, keys).sum())


BACKENDS = {
    Scheme.PLAINTEXT_REF: PlaintextReference,
    Scheme.APPROX_REAL: ApproxReal,
    Scheme.EXACT_INT: ExactInt,
    Scheme.BINARY: BinaryXor,
}


def make_backend(scheme, rng: np.random.Generator | None = None) -> Backend:
    return BACKENDS[Scheme.parse(scheme)](rng)


def encrypt(template, keys: KeyMaterial, backend: Backend | None = None) -> ProtectedTemplate:
    backend = backend or make_backend(keys.scheme)
    return backend.encrypt(template, keys)


def compare_protected(a: ProtectedTemplate, b: ProtectedTemplate, keys: KeyMaterial,
                      backend: Backend | None = None) -> ProtectedTemplate:
    backend = backend or make_backend(keys.scheme)
    return backend.compare(a, b, keys)


# -- representation front-end and protected index -------------------------------


@dataclass(frozen=True)
class Encoder:
    """Maps real embeddings into the representation a scheme encrypts."""

    scheme: Scheme
    quant: QuantizationParams | None = None
    stats: TrainingStats | None = None

    def __call__(self, v) -> np.ndarray:
        if self.scheme is Scheme.EXACT_INT:
            if self.quant is None:
                raise ProtectionError("EXACT_INT needs quantization parameters")
            return quantize(v, self.quant)
        if self.scheme is Scheme.BINARY:
            if self.stats is None:
                raise ProtectionError("BINARY needs training statistics for binarization")
            return binarize(v, self.stats)
        return np.asarray(v, dtype=np.float64)


@dataclass(frozen=True, eq=False)
class ProtectedIndex:
    """Encrypted counterpart of :class:`~bioindex.index.IndexForest`."""

    n1: int
    dim: int
    fusion: int
    pairing: str
    levels: tuple[tuple[ProtectedTemplate, ...], ...]
    leaf_subjects: np.ndarray
    scheme: Scheme
    key_id: str
    encoder: Encoder | None = None

    @property
    def gallery_size(self) -> int:
        return len(self.leaf_subjects)

    @property
    def level_count(self) -> int:
        return len(self.levels)

    def node_counts(self) -> tuple[int, ...]:
        return tuple(len(level) for level in self.levels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ProtectedIndex):
            return NotImplemented
        return (
            (self.n1, self.dim, self.fusion, self.pairing, self.scheme, self.key_id)
            == (other.n1, other.dim, other.fusion, other.pairing, other.scheme, other.key_id)
            and np.array_equal(self.leaf_subjects, other.leaf_subjects)
            and self.levels == other.levels
        )

    __hash__ = None  # type: ignore[assignment]


def encrypt_index(forest, keys: KeyMaterial, encoder: Encoder,
                  backend: Backend | None = None) -> ProtectedIndex:
    backend = backend or make_backend(keys.scheme)
    if encoder.scheme is not keys.scheme:
        raise KeyMismatch("encoder and key scheme differ")
    levels = tuple(
        tuple(backend.encrypt(encoder(row), keys) for row in level) for level in forest.levels
    )
    return ProtectedIndex(forest.n1, forest.dim, int(forest.fusion), forest.pairing.value,
                          levels, np.asarray(forest.leaf_subjects).copy(), keys.scheme,
                          keys.key_id, encoder)


class ProtectedComparator:
    """Retrieval comparator that scores encrypted probes against encrypted nodes."""

    def __init__(self, backend: Backend, keys: KeyMaterial, encoder: Encoder):
        if backend.scheme is not keys.scheme or encoder.scheme is not keys.scheme:
            raise KeyMismatch("backend, encoder and keys must share a scheme")
        self.backend = backend
        self.keys = keys
        self.encoder = encoder

    def prepare(self, probe) -> ProtectedTemplate:
        return self.backend.encrypt(self.encoder(probe), self.keys)

    def scores(self, prepared: ProtectedTemplate, items: Sequence[ProtectedTemplate],
               idx: np.ndarray) -> np.ndarray:
        out = np.empty(len(idx), dtype=np.float64)
        for k, i in enumerate(idx):
            item = items[int(i)]
            if item.key_id != self.keys.key_id:
                raise KeyMismatch(f"index key {item.key_id} != comparator key {self.keys.key_id}")
            out[k] = self.backend.reveal(self.backend.compare(prepared, item, self.keys), self.keys)
        return out


def rekey(items, old_keys: KeyMaterial, new_keys: KeyMaterial,
          backend: Backend | None = None):
    """Re-encrypt templates (a sequence or a :class:`ProtectedIndex`) under ``new_keys``."""
    backend = backend or make_backend(old_keys.scheme)
    if new_keys.scheme is not old_keys.scheme:
        raise KeyMismatch("rekey cannot change the scheme")
    if new_keys.key_id == old_keys.key_id:
        raise KeyMismatch("new key must differ from the old key")

    def move(ct: ProtectedTemplate) -> ProtectedTemplate:
        return backend.encrypt(backend.decrypt(ct, old_keys), new_keys)

    if isinstance(items, ProtectedIndex):
        levels = tuple(tuple(move(ct) for ct in level) for level in items.levels)
        return ProtectedIndex(items.n1, items.dim, items.fusion, items.pairing, levels,
                              items.leaf_subjects.copy(), items.scheme, new_keys.key_id,
                              items.encoder)
    return [move(ct) for ct in items]
