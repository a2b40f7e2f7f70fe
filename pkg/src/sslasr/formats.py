"""Binary containers for features, labels, codebooks and checkpoints.

All multi-byte fields are little-endian. Every container starts with an
8-byte magic and a version byte, so ``inspect`` can identify any artifact by
its first nine bytes and report its header without touching the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

VERSION = 1
FEATURE_MAGIC = b"SSLFEAT\x00"
LABEL_MAGIC = b"SSLLABL\x00"
CODEBOOK_MAGIC = b"SSLCODE\x00"
CHECKPOINT_MAGIC = b"SSLCKPT\x00"
KINDS = ("fbank", "mfcc", "latent")


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)


def _read_exact(f, n, what):
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}")
    return buf


def _check_magic(f, magic):
    head = f.read(9)
    if len(head) < 9 or head[:8] != magic:
        raise FormatError(f"bad magic, expected {magic!r}")
    if head[8] != VERSION:
        raise FormatError(f"unsupported version {head[8]}")


def _pack_id(uid: str) -> bytes:
    raw = uid.encode("utf-8")
    return struct.pack("<H", len(raw)) + raw


def _unpack_id(f) -> str:
    (n,) = struct.unpack("<H", _read_exact(f, 2, "id length"))
    return _read_exact(f, n, "id").decode("utf-8")


# ---------------------------------------------------------------------------
# feature cache: one self-describing record per utterance, concatenated
# ---------------------------------------------------------------------------


def pack_feature_record(uid: str, frames: np.ndarray, frame_rate: float) -> bytes:
    frames = np.ascontiguousarray(frames, dtype="<f4")
    T, D = frames.shape
    return (FEATURE_MAGIC + bytes([VERSION]) + _pack_id(uid)
            + struct.pack("<IId", T, D, frame_rate) + frames.tobytes())


def write_feature_cache(path, records) -> None:
    """``records`` yields ``(id, frames (T, D), frame_rate)``."""
    with open(path, "wb") as f:
        for uid, frames, rate in records:
            f.write(pack_feature_record(uid, frames, rate))


def read_feature_cache(path) -> dict:
    """Map id -> (frames float32 (T, D), frame_rate)."""
    out = {}
    with open(path, "rb") as f:
        while True:
            head = f.peek(1) if hasattr(f, "peek") else b""
            if not head:
                break
            _check_magic(f, FEATURE_MAGIC)
            uid = _unpack_id(f)
            T, D, rate = struct.unpack("<IId", _read_exact(f, 16, "feature header"))
            data = np.frombuffer(_read_exact(f, 4 * T * D, "feature payload"), dtype="<f4")
            out[uid] = (data.reshape(T, D).astype(np.float32), rate)
    return out


# ---------------------------------------------------------------------------
# label store: a directory with one record file per utterance
# ---------------------------------------------------------------------------


def pack_label_record(uid: str, frame_rate: float, labels: np.ndarray) -> bytes:
    labels = np.asarray(labels)
    if labels.size and (labels.min() < 0 or labels.max() > 0xFFFF):
        raise ValueError("labels must fit in u16")
    return (LABEL_MAGIC + bytes([VERSION]) + _pack_id(uid)
            + struct.pack("<dI", frame_rate, labels.size) + labels.astype("<u2").tobytes())


def read_label_record(path):
    """Return ``(id, frame_rate, labels int64)``."""
    with open(path, "rb") as f:
        _check_magic(f, LABEL_MAGIC)
        uid = _unpack_id(f)
        rate, n = struct.unpack("<dI", _read_exact(f, 12, "label header"))
        labels = np.frombuffer(_read_exact(f, 2 * n, "labels"), dtype="<u2").astype(np.int64)
    return uid, rate, labels


class LabelStore:
    """Directory of per-utterance label records plus an error log."""

    def __init__(self, root):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, uid: str) -> Path:
        safe = uid.replace("/", "__")
        return self.root / f"{safe}.lab"

    def __contains__(self, uid) -> bool:
        return self._path(uid).exists()

    def ids(self) -> list:
        return sorted(read_label_record(p)[0] for p in self.root.glob("*.lab"))

    def __len__(self) -> int:
        return sum(1 for _ in self.root.glob("*.lab"))

    def write(self, uid: str, frame_rate: float, labels) -> None:
        atomic_write(self._path(uid), pack_label_record(uid, frame_rate, labels))

    def read(self, uid: str):
        """Return ``(frame_rate, labels)``."""
        _, rate, labels = read_label_record(self._path(uid))
        return rate, labels

    def log_error(self, uid: str, message: str) -> None:
        with open(self.root / "errors.jsonl", "a", encoding="utf-8") as f:
            f.write(canonical_json({"id": uid, "error": message}) + "\n")

    def errors(self) -> list:
        p = self.root / "errors.jsonl"
        if not p.exists():
            return []
        return [json.loads(line) for line in p.read_text().splitlines() if line.strip()]

    def digest(self) -> str:
        h = hashlib.sha256()
        for p in sorted(self.root.glob("*.lab")):
            h.update(p.name.encode())
            h.update(p.read_bytes())
        return h.hexdigest()


# ---------------------------------------------------------------------------
# codebook
# ---------------------------------------------------------------------------


def write_codebook_file(path, centroids, kind: str, frame_rate: float, metadata: dict) -> None:
    centroids = np.ascontiguousarray(centroids, dtype="<f4")
    k, D = centroids.shape
    meta = canonical_json(metadata).encode("utf-8")
    blob = (CODEBOOK_MAGIC + bytes([VERSION]) + struct.pack("<IIBd", k, D, KINDS.index(kind), frame_rate)
            + centroids.tobytes() + struct.pack("<I", len(meta)) + meta)
    atomic_write(path, blob)


def read_codebook_file(path, header_only: bool = False) -> dict:
    with open(path, "rb") as f:
        _check_magic(f, CODEBOOK_MAGIC)
        k, D, kind, rate = struct.unpack("<IIBd", _read_exact(f, 17, "codebook header"))
        if kind >= len(KINDS):
            raise FormatError(f"unknown feature kind code {kind}")
        if header_only:
            f.seek(4 * k * D, os.SEEK_CUR)
            centroids = None
        else:
            centroids = np.frombuffer(_read_exact(f, 4 * k * D, "centroids"), dtype="<f4").reshape(k, D)
        (n,) = struct.unpack("<I", _read_exact(f, 4, "metadata length"))
        meta = json.loads(_read_exact(f, n, "metadata").decode("utf-8"))
    return {"k": k, "dim": D, "feature_kind": KINDS[kind], "frame_rate": rate,
            "centroids": centroids, "metadata": meta}


# ---------------------------------------------------------------------------
# checkpoint: header JSON, float32 blobs, trailing sha256
# ---------------------------------------------------------------------------


def write_checkpoint_file(path, header: dict, params: dict) -> str:
    """Write named float32 arrays plus a JSON header; returns the checksum."""
    names = sorted(params)
    index, blobs, offset = [], [], 0
    for name in names:
        arr = np.ascontiguousarray(params[name], dtype="<f4")
        raw = arr.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    full_header = dict(header)
    full_header["params"] = index
    head = canonical_json(full_header).encode("utf-8")
    body = CHECKPOINT_MAGIC + bytes([VERSION]) + struct.pack("<I", len(head)) + head + b"".join(blobs)
    digest = hashlib.sha256(body).digest()
    atomic_write(path, body + digest)
    return digest.hex()


def read_checkpoint_file(path, header_only: bool = False, verify: bool = True):
    """Return ``(header, params)``; ``params`` is None with ``header_only``."""
    path = Path(path)
    with open(path, "rb") as f:
        _check_magic(f, CHECKPOINT_MAGIC)
        (n,) = struct.unpack("<I", _read_exact(f, 4, "header length"))
        header = json.loads(_read_exact(f, n, "header").decode("utf-8"))
        f.seek(-32, os.SEEK_END)
        stored = f.read(32).hex()
        header["checksum"] = stored
        if header_only:
            return header, None
        f.seek(13 + n)
        payload = f.read()[:-32]
    if verify:
        with open(path, "rb") as f:
            body = f.read()[:-32]
        if hashlib.sha256(body).hexdigest() != stored:
            raise FormatError(f"{path}: checksum mismatch")
    params = {}
    for entry in header["params"]:
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        params[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).astype(np.float32)
    return header, params


def inspect_header(path) -> dict:
    """Identify an artifact from its magic and return its header fields."""
    path = Path(path)
    with open(path, "rb") as f:
        magic = f.read(8)
    if magic == CHECKPOINT_MAGIC:
        header, _ = read_checkpoint_file(path, header_only=True)
        header = dict(header)
        header["params"] = {p["name"]: p["shape"] for p in header["params"]}
        return {"type": "checkpoint", "version": VERSION, **header}
    if magic == CODEBOOK_MAGIC:
        info = read_codebook_file(path, header_only=True)
        info.pop("centroids")
        return {"type": "codebook", "version": VERSION, "checksum": file_sha256(path), **info}
    if magic == LABEL_MAGIC:
        with open(path, "rb") as f:
            _check_magic(f, LABEL_MAGIC)
            uid = _unpack_id(f)
            rate, n = struct.unpack("<dI", _read_exact(f, 12, "label header"))
        return {"type": "labels", "version": VERSION, "id": uid, "frame_rate": rate, "frames": n}
    if magic == FEATURE_MAGIC:
        count, first = 0, None
        with open(path, "rb") as f:
            while f.peek(1):
                _check_magic(f, FEATURE_MAGIC)
                uid = _unpack_id(f)
                T, D, rate = struct.unpack("<IId", _read_exact(f, 16, "feature header"))
                f.seek(4 * T * D, os.SEEK_CUR)
                if first is None:
                    first = {"id": uid, "frames": T, "dim": D, "frame_rate": rate}
                count += 1
        return {"type": "features", "version": VERSION, "records": count, "first": first}
    if path.suffix in (".json", ".jsonl"):
        return {"type": "json", "checksum": file_sha256(path)}
    raise FormatError(f"{path}: unrecognised artifact")
