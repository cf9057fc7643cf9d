"""File formats: datasets, checkpoints, logs and reports.

Every writer goes through a temporary file in the target directory followed by
``os.replace``, so an interrupted run never leaves a partial artifact.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import struct
import subprocess
import tempfile
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from .dynamics import PointCloud
from .errors import CompatibilityError, DataError

DATASET_MAGIC = b"IMSM"
DATASET_VERSION = 1
_HEADER = struct.Struct("<4sIII")
CHECKPOINT_FORMAT = "imsm-checkpoint"
CHECKPOINT_VERSION = 1
PACKAGE_VERSION = "0.1.0"


def atomic_write_bytes(path, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
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
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=True) + "\n"


def atomic_write_json(path, obj) -> Path:
    return atomic_write_text(path, canonical_json(obj))


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise DataError(f"{path}: file not found") from None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: not a valid JSON document ({exc})") from None


def digest(obj) -> str:
    """sha256 of the canonical JSON form of ``obj``."""
    return hashlib.sha256(json.dumps(obj, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@lru_cache(maxsize=1)
def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=here,
                             capture_output=True, text=True, timeout=5, check=True).stdout.strip()
        if out:
            return f"v{PACKAGE_VERSION}-g{out}" if not out.startswith("v") else out
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{PACKAGE_VERSION}"


def artifact_metadata(config_digest: str | None = None, **extra) -> dict:
    meta = {"version": version_string(), "config_digest": config_digest}
    meta.update(extra)
    return meta


# --------------------------------------------------------------------------
# datasets


def _dataset_format(path: Path, fmt: str | None) -> str:
    if fmt is not None:
        return fmt
    return "csv" if path.suffix.lower() == ".csv" else "binary"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def encode_dataset(points: np.ndarray, fmt: str) -> bytes:
    x = np.ascontiguousarray(points, dtype="<f8")
    n, d = x.shape
    if fmt == "csv":
        buf = io.StringIO()
        buf.write(",".join(f"x{i}" for i in range(d)) + "\n")
        for row in x:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue().encode("ascii")
    if fmt == "binary":
        return _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, d) + x.tobytes()
    raise DataError(f"unknown dataset format {fmt!r}")


def write_dataset(path, cloud: PointCloud, fmt: str | None = None, metadata: dict | None = None) -> Path:
    """Write points plus a JSON sidecar holding provenance metadata."""
    path = Path(path)
    fmt = _dataset_format(path, fmt)
    data = encode_dataset(cloud.points, fmt)
    meta = dict(cloud.metadata)
    meta.update(metadata or {})
    meta.update({"format": fmt, "N": cloud.N, "d": cloud.d, "sha256": hashlib.sha256(data).hexdigest()})
    atomic_write_bytes(path, data)
    atomic_write_json(sidecar_path(path), meta)
    return path


def decode_dataset(data: bytes, fmt: str, name: str = "dataset") -> np.ndarray:
    if fmt == "binary":
        if len(data) < _HEADER.size:
            raise DataError(f"{name}: file too short for a dataset header")
        magic, version, n, d = _HEADER.unpack_from(data)
        if magic != DATASET_MAGIC:
            raise DataError(f"{name}: bad magic {magic!r}, expected {DATASET_MAGIC!r}")
        if version != DATASET_VERSION:
            raise DataError(f"{name}: unsupported dataset version {version}")
        expected = _HEADER.size + 8 * n * d
        if len(data) != expected:
            raise DataError(f"{name}: expected {expected} bytes for {n}x{d} points, found {len(data)}")
        return np.frombuffer(data, dtype="<f8", offset=_HEADER.size).reshape(n, d).astype(np.float64)
    if fmt == "csv":
        try:
            rows = list(csv.reader(io.StringIO(data.decode("ascii"))))
        except UnicodeDecodeError:
            raise DataError(f"{name}: CSV dataset is not ASCII text") from None
        if not rows:
            raise DataError(f"{name}: empty CSV dataset")
        header = rows[0]
        if header != [f"x{i}" for i in range(len(header))]:
            raise DataError(f"{name}: CSV header must be x0,x1,...; found {','.join(header)}")
        try:
            x = np.array([[float(v) for v in r] for r in rows[1:] if r], dtype=np.float64)
        except ValueError as exc:
            raise DataError(f"{name}: {exc}") from None
        if x.size == 0 or x.shape[1] != len(header):
            raise DataError(f"{name}: rows do not match the {len(header)}-column header")
        return x
    raise DataError(f"unknown dataset format {fmt!r}")


def read_dataset(path, fmt: str | None = None) -> PointCloud:
    path = Path(path)
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise DataError(f"{path}: dataset not found") from None
    points = decode_dataset(data, _dataset_format(path, fmt), str(path))
    meta = {}
    if sidecar_path(path).exists():
        meta = read_json(sidecar_path(path))
    return PointCloud(points, meta)


# --------------------------------------------------------------------------
# checkpoints and tables


def save_checkpoint(path, kind: str, model: dict, metadata: dict) -> Path:
    doc = {"format": CHECKPOINT_FORMAT, "format_version": CHECKPOINT_VERSION, "kind": kind,
           "metadata": metadata, "model": model}
    return atomic_write_json(path, doc)


def load_checkpoint(path, kind: str) -> tuple[dict, dict]:
    """Return ``(model, metadata)``; a checkpoint of another kind is a compatibility error."""
    doc = read_json(path)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint file")
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise CompatibilityError(f"{path}: checkpoint version {doc.get('format_version')} is not supported")
    if doc.get("kind") != kind:
        raise CompatibilityError(f"{path}: expected a {kind} checkpoint, found {doc.get('kind')!r}")
    return doc["model"], doc.get("metadata", {})


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_csv(columns, rows) -> str:
    lines = [",".join(columns)]
    lines += [",".join(_cell(r[c]) for c in columns) for r in rows]
    return "\n".join(lines) + "\n"


def write_table(path, columns, rows) -> Path:
    return atomic_write_text(path, table_csv(columns, rows))


def write_histogram(path, hist) -> Path:
    rows = [{"bin_cx": float(c[0]), "bin_cy": float(c[1]), "mass": float(m)}
            for c, m in zip(hist.centers, hist.masses)]
    return write_table(path, ("bin_cx", "bin_cy", "mass"), rows)


def write_yaml(path, obj) -> Path:
    return atomic_write_text(path, yaml.safe_dump(obj, sort_keys=False))
