"""Versioned binary checkpoints.

Layout (all integers little-endian):

    offset  size  field
    0       8     magic b"LMKCKPT\\0"
    8       4     format version (uint32)
    12      4     header length H (uint32)
    16      H     header: UTF-8 JSON, keys sorted, no whitespace
    16+H    4     CRC32 of bytes [0, 16+H)
    20+H    4     section count S (uint32)
    then S sections, each:
            4     name length n (uint32), then n bytes UTF-8 name
            1     dtype code (0 float64, 1 int64, 2 uint8)
            1     ndim d
            8*d   shape (uint64 each)
            8     payload length in bytes (uint64), then the payload
    end     4     CRC32 of every preceding byte

Saving writes to a temporary file in the same directory and renames it over
the target, so readers never see a partial file.  Identical content always
produces identical bytes.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field

import numpy as np

from .corpus import Vocabulary

MAGIC = b"LMKCKPT\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8"), 2: np.dtype("u1")}
_CODES = {"f": 0, "i": 1, "u": 2, "b": 2}


class CheckpointError(ValueError):
    pass


class VersionMismatch(CheckpointError):
    pass


class VocabularyMismatch(CheckpointError):
    pass


@dataclass
class Checkpoint:
    header: dict
    arrays: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return self.header.get("kind", "")


def _encode_array(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    code = _CODES.get(arr.dtype.kind)
    if code is None:
        raise CheckpointError(f"section {name}: unsupported dtype {arr.dtype}")
    data = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
    nb = name.encode("utf-8")
    out = struct.pack("<I", len(nb)) + nb + struct.pack("<BB", code, arr.ndim)
    out += struct.pack(f"<{arr.ndim}Q", *arr.shape) if arr.ndim else b""
    return out + struct.pack("<Q", len(data)) + data


def dumps(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    head = MAGIC + struct.pack("<II", VERSION, len(header)) + header
    buf = bytearray(head)
    buf += struct.pack("<I", zlib.crc32(head))
    names = sorted(ckpt.arrays)
    buf += struct.pack("<I", len(names))
    for name in names:
        buf += _encode_array(name, ckpt.arrays[name])
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    return bytes(buf)


def loads(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if data[:8] != MAGIC:
        raise CheckpointError(f"{source}: not a checkpoint (bad magic)")
    if len(data) < 24:
        raise CheckpointError(f"{source}: truncated header")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != VERSION:
        raise VersionMismatch(f"{source}: checkpoint format version {version}, this build reads version {VERSION}")
    end = 16 + hlen
    if len(data) < end + 8:
        raise CheckpointError(f"{source}: truncated header")
    (crc,) = struct.unpack_from("<I", data, end)
    if crc != zlib.crc32(data[:end]):
        raise CheckpointError(f"{source}: header checksum mismatch")
    (crc_all,) = struct.unpack_from("<I", data, len(data) - 4)
    if crc_all != zlib.crc32(data[:-4]):
        raise CheckpointError(f"{source}: body checksum mismatch")
    header = json.loads(data[16:end].decode("utf-8"))
    off = end + 4
    (count,) = struct.unpack_from("<I", data, off)
    off += 4
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", data, off)
        name = data[off + 4: off + 4 + n].decode("utf-8")
        off += 4 + n
        code, ndim = struct.unpack_from("<BB", data, off)
        off += 2
        shape = struct.unpack_from(f"<{ndim}Q", data, off) if ndim else ()
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", data, off)
        off += 8
        if code not in _DTYPES:
            raise CheckpointError(f"{source}: section {name} has unknown dtype code {code}")
        arr = np.frombuffer(data, dtype=_DTYPES[code], count=nbytes // _DTYPES[code].itemsize, offset=off)
        arrays[name] = arr.reshape(shape).copy()
        off += nbytes
    if off != len(data) - 4:
        raise CheckpointError(f"{source}: trailing bytes after sections")
    return Checkpoint(header, arrays)


def write_atomic(path, data: bytes) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=d)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    write_atomic(path, dumps(ckpt))


def load_checkpoint(path, vocab: Vocabulary | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        ckpt = loads(fh.read(), os.fspath(path))
    if "vocab" in ckpt.arrays:
        stored = Vocabulary.loads(ckpt.arrays["vocab"].tobytes().decode("utf-8"))
        if stored.digest() != ckpt.header.get("vocab_sha256"):
            raise CheckpointError(f"{path}: embedded vocabulary does not match its recorded hash")
    if vocab is not None and vocab.digest() != ckpt.header.get("vocab_sha256"):
        raise VocabularyMismatch(
            f"{path}: vocabulary hash {vocab.digest()[:12]} does not match checkpoint {str(ckpt.header.get('vocab_sha256'))[:12]}"
        )
    return ckpt


def vocab_of(ckpt: Checkpoint) -> Vocabulary:
    return Vocabulary.loads(ckpt.arrays["vocab"].tobytes().decode("utf-8"))


def _vocab_section(vocab: Vocabulary) -> np.ndarray:
    return np.frombuffer(vocab.dumps().encode("utf-8"), dtype=np.uint8)


# ----------------------------------------------------------------------------
# language models
# ----------------------------------------------------------------------------

def lm_checkpoint(model, vocab: Vocabulary, step: int = 0, train_state: dict | None = None, arrays: dict | None = None) -> Checkpoint:
    """Bundle model weights, Adagrad accumulators and trainer state."""
    if list(vocab.words) != list(model.words):
        raise VocabularyMismatch("model words differ from the vocabulary being saved")
    out = {"vocab": _vocab_section(vocab)}
    for name, p in model.named_parameters().items():
        out[f"param/{name}"] = p.value
        out[f"accum/{name}"] = p.accum
    out.update(arrays or {})
    header = {
        "kind": "lm",
        "arch": model.arch,
        "step": int(step),
        "vocab_sha256": vocab.digest(),
        "train_state": train_state or {},
    }
    return Checkpoint(header, out)


def save(model, path, vocab: Vocabulary, step: int = 0, train_state: dict | None = None, arrays: dict | None = None) -> None:
    save_checkpoint(path, lm_checkpoint(model, vocab, step, train_state, arrays))


def restore_model(ckpt: Checkpoint):
    """Rebuild the LanguageModel and copy weights and accumulators into it."""
    from .model import LanguageModel

    if ckpt.kind != "lm":
        raise CheckpointError(f"checkpoint holds a {ckpt.kind!r} model, expected 'lm'")
    vocab = vocab_of(ckpt)
    arch = dict(ckpt.header["arch"])
    arch.pop("vocab_size", None)
    model = LanguageModel(arch, vocab.words)
    for name, p in model.named_parameters().items():
        try:
            p.value[...] = ckpt.arrays[f"param/{name}"]
            p.accum[...] = ckpt.arrays[f"accum/{name}"]
        except KeyError:
            raise CheckpointError(f"checkpoint lacks parameter {name}") from None
    return model


def load(path, vocab: Vocabulary | None = None):
    """(model, checkpoint, step)."""
    ckpt = load_checkpoint(path, vocab)
    return restore_model(ckpt), ckpt, int(ckpt.header.get("step", 0))


# ----------------------------------------------------------------------------
# n-gram models
# ----------------------------------------------------------------------------

def save_kn(model, path, vocab: Vocabulary) -> None:
    from .ngram import kn_to_arrays

    arrays = {f"kn/{k}": v for k, v in kn_to_arrays(model).items()}
    arrays["vocab"] = _vocab_section(vocab)
    save_checkpoint(path, Checkpoint({"kind": "kn", "order": model.order, "vocab_sha256": vocab.digest()}, arrays))


def load_kn(path, vocab: Vocabulary | None = None):
    from .ngram import kn_from_arrays

    ckpt = load_checkpoint(path, vocab)
    if ckpt.kind != "kn":
        raise CheckpointError(f"checkpoint holds a {ckpt.kind!r} model, expected 'kn'")
    arrays = {k[3:]: v for k, v in ckpt.arrays.items() if k.startswith("kn/")}
    return kn_from_arrays(arrays), vocab_of(ckpt)


def peek_kind(path) -> str:
    with open(path, "rb") as fh:
        return loads(fh.read(), os.fspath(path)).kind
