"""Binary parameter snapshots and the append-only metrics log.

Checkpoint layout (all integers little-endian)::

    b"MOMA" | u32 version | u32 header length | JSON header | payload | u32 CRC32(payload)

The header holds the ViT config, role tag, free-form ``extra`` metadata and
a manifest of ``{name, rank, dims, offset}`` entries; offsets are relative
to the payload start. Payload values are little-endian float32.
"""
from __future__ import annotations

import csv
import json
import os
import struct
import zlib
from pathlib import Path
from typing import Mapping

import numpy as np

from .autograd import Tensor
from .vit import TEACHER_ROLES, ModelWeights, ViTConfig

MAGIC = b"MOMA"
VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f4")


class CheckpointError(Exception):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class ManifestError(CheckpointError):
    pass


class ConfigMismatchError(CheckpointError):
    pass


def _atomic_write(path: Path, blob: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def encode_checkpoint(weights: ModelWeights, extra: Mapping | None = None) -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, t in weights.params.items():
        arr = np.ascontiguousarray(t.data, dtype=_PAYLOAD_DTYPE)
        manifest.append({"name": name, "rank": arr.ndim, "dims": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    payload = b"".join(chunks)
    header = {
        "config": weights.config.to_dict(),
        "role": weights.role,
        "manifest": manifest,
        "payload_bytes": len(payload),
        "extra": dict(extra or {}),
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join(
        [MAGIC, struct.pack("<II", VERSION, len(hbytes)), hbytes, payload, struct.pack("<I", zlib.crc32(payload))]
    )


def save_checkpoint(weights: ModelWeights, path, extra: Mapping | None = None) -> Path:
    path = Path(path)
    _atomic_write(path, encode_checkpoint(weights, extra))
    return path


def decode_checkpoint(blob: bytes, expected_config: ViTConfig | None = None) -> tuple[ModelWeights, dict]:
    if len(blob) < 16 or blob[:4] != MAGIC:
        raise BadMagicError(f"not a MOMA checkpoint (magic {blob[:4]!r})")
    version, hlen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version}, reader supports {VERSION}")
    start = 12 + hlen
    if start + 4 > len(blob):
        raise ManifestError("header length runs past end of file")
    try:
        header = json.loads(blob[12:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestError(f"unreadable header: {exc}") from exc
    payload_len = header.get("payload_bytes", -1)
    if payload_len < 0 or start + payload_len + 4 != len(blob):
        raise ManifestError(f"payload size {payload_len} inconsistent with file size {len(blob)}")
    payload = blob[start : start + payload_len]
    (crc,) = struct.unpack_from("<I", blob, start + payload_len)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("payload checksum mismatch")

    config = ViTConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise ConfigMismatchError(f"checkpoint config {config} does not match expected {expected_config}")

    params, spans = {}, []
    for entry in header["manifest"]:
        dims = tuple(entry["dims"])
        if len(dims) != entry["rank"]:
            raise ManifestError(f"{entry['name']}: rank {entry['rank']} vs dims {dims}")
        nbytes = int(np.prod(dims, dtype=np.int64)) * _PAYLOAD_DTYPE.itemsize
        off = entry["offset"]
        if off < 0 or off + nbytes > payload_len:
            raise ManifestError(f"{entry['name']}: bytes [{off}, {off + nbytes}) overflow payload of {payload_len}")
        spans.append((off, off + nbytes, entry["name"]))
        arr = np.frombuffer(payload, dtype=_PAYLOAD_DTYPE, count=nbytes // 4, offset=off).reshape(dims)
        params[entry["name"]] = arr
    spans.sort()
    for (a0, a1, an), (b0, _, bn) in zip(spans, spans[1:]):
        if b0 < a1:
            raise ManifestError(f"manifest entries {an} and {bn} overlap")

    role = header["role"]
    tensors = {n: Tensor(a.astype(np.float32), requires_grad=role not in TEACHER_ROLES, dtype=np.float32) for n, a in params.items()}
    weights = ModelWeights(config, tensors, role)
    if weights.is_teacher:
        weights.freeze()
    return weights, header.get("extra", {})


def load_checkpoint(path, expected_config: ViTConfig | None = None, with_extra: bool = False):
    blob = Path(path).read_bytes()
    weights, extra = decode_checkpoint(blob, expected_config)
    return (weights, extra) if with_extra else weights


# -- metrics log -------------------------------------------------------------

BASE_COLUMNS = ("run_id", "step", "wall_time", "lr")


class MetricsError(ValueError):
    pass


class MetricsLog:
    """CSV with a header line; rows are appended and flushed one at a time."""

    def __init__(self, path, metric_names=()):
        self.path = Path(path)
        self.last_step: dict[str, int] = {}
        if self.path.exists() and self.path.stat().st_size:
            with open(self.path, newline="") as fh:
                reader = csv.reader(fh)
                header = next(reader)
                for row in reader:
                    self.last_step[row[0]] = int(row[1])
            self.columns = tuple(header)
            unknown = set(metric_names) - set(self.columns)
            if unknown:
                raise MetricsError(f"existing log {self.path} lacks columns {sorted(unknown)}")
        else:
            self.columns = BASE_COLUMNS + tuple(metric_names)
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "w", newline="") as fh:
                csv.writer(fh).writerow(self.columns)

    @property
    def metric_names(self) -> tuple[str, ...]:
        return self.columns[len(BASE_COLUMNS) :]


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def append_metrics(log: MetricsLog, row: Mapping) -> None:
    unknown = set(row) - set(log.columns)
    if unknown:
        raise MetricsError(f"unknown metric columns {sorted(unknown)}")
    run_id, step = str(row["run_id"]), int(row["step"])
    last = log.last_step.get(run_id)
    if last is not None and step <= last:
        raise MetricsError(f"run {run_id}: step {step} does not follow {last}")
    with open(log.path, "a", newline="") as fh:
        csv.writer(fh).writerow([_fmt(row.get(c)) for c in log.columns])
    log.last_step[run_id] = step


def read_metrics(path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for raw in csv.DictReader(fh):
            row = {}
            for key, value in raw.items():
                if key == "run_id":
                    row[key] = value
                elif key == "step":
                    row[key] = int(value)
                else:
                    row[key] = float(value) if value != "" else None
            rows.append(row)
    return rows
