"""Checkpoint container shared by translators and seq2seq models.

Layout: an uncompressed ``.npz`` archive readable with ``numpy.load``. Every weight
tensor is stored under its parameter name; the reserved entry ``__meta__`` holds a
UTF-8 JSON document with ``format`` (container kind), ``version``, and free-form
fields (config echo, training log, stage tag). Arrays are stored verbatim, so
save/load is bit-exact.
"""
from __future__ import annotations

import hashlib
import json
import zipfile

import numpy as np

FORMAT_VERSION = 1
_META = "__meta__"


class CheckpointError(Exception):
    pass


class CorruptCheckpoint(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


def save(path, arrays: dict[str, np.ndarray], meta: dict, kind: str) -> None:
    if _META in arrays:
        raise ValueError(f"{_META!r} is reserved")
    doc = {"format": kind, "version": FORMAT_VERSION, **meta}
    payload = {name: np.asarray(a) for name, a in arrays.items()}
    payload[_META] = np.frombuffer(json.dumps(doc, sort_keys=True).encode(), dtype=np.uint8)
    # fixed entry timestamps keep identical content byte-identical on disk
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(payload):
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as f:
                np.lib.format.write_array(f, payload[name], allow_pickle=False)


def load(path, kind: str) -> tuple[dict[str, np.ndarray], dict]:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {name: z[name] for name in z.files}
    except (zipfile.BadZipFile, EOFError, ValueError, OSError, KeyError) as e:
        raise CorruptCheckpoint(f"{path}: {e}") from None
    if _META not in arrays:
        raise CorruptCheckpoint(f"{path}: missing metadata")
    try:
        meta = json.loads(arrays.pop(_META).tobytes().decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable metadata ({e})") from None
    if meta.get("format") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {meta.get('format')!r}")
    if meta.get("version") != FORMAT_VERSION:
        raise VersionMismatch(f"{path}: version {meta.get('version')} != {FORMAT_VERSION}")
    return arrays, meta


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
