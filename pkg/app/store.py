"""Versioned artifact files: datasets, checkpoints, runs and reports.

Layout: a magic line naming the kind, one JSON header line (sorted keys), then the
payload. The header carries the format version, the producing config digest and
the payload's byte count and SHA-256; all are checked on load. Files contain no
timestamps, so reruns of one config are byte-identical.
"""
from __future__ import annotations

import hashlib
import json
import pathlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Mapping, Optional, Tuple, Union

import numpy as np
import structlog
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .archs import ArchitectureConfig, Checkpoint
from .errors import DigestError, VersionError
from .toyclimate import Dataset, DatasetSplit, NormalizationStats, RunRecord

log = structlog.get_logger(__name__)

FORMAT_VERSION = "1.1"
Kind = Literal["dataset", "checkpoint", "run", "report"]
MAGIC: Dict[str, bytes] = {"dataset": b"NODC1", "checkpoint": b"NOCK1", "run": b"NORUN1", "report": b"NORPT1"}
DTYPE = np.dtype("<f8")


class ArtifactHeader(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: str
    kind: Kind
    config_digest: str
    payload_sha256: str
    payload_bytes: int = Field(ge=0)
    meta: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class LoadedArtifact:
    obj: Any
    header: ArtifactHeader
    notes: List[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# payload bundles: JSON description line + little-endian float64 arrays + optional tail


def _pack(meta: Mapping[str, Any], arrays: Mapping[str, Optional[np.ndarray]], tail: bytes = b"") -> bytes:
    manifest, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        if arr is None:
            continue
        a = np.ascontiguousarray(arr, dtype=DTYPE)
        manifest.append({"name": name, "shape": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.size
    head = json.dumps({"meta": dict(meta), "arrays": manifest}, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return head + b"\n" + b"".join(chunks) + tail


def _unpack(payload: bytes) -> Tuple[Dict[str, Any], Dict[str, np.ndarray], bytes]:
    head, sep, body = payload.partition(b"\n")
    if not sep:
        raise DigestError("artifact payload has no description line")
    try:
        described = json.loads(head.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DigestError("artifact payload description is corrupt") from exc
    total = sum(int(np.prod(m["shape"], dtype=np.int64)) for m in described["arrays"])
    values = np.frombuffer(body[: total * DTYPE.itemsize], dtype=DTYPE)
    if values.size != total:
        raise DigestError("artifact payload is shorter than its array manifest")
    arrays = {}
    for m in described["arrays"]:
        size = int(np.prod(m["shape"], dtype=np.int64))
        arrays[m["name"]] = values[m["offset"] : m["offset"] + size].reshape(m["shape"]).copy()
    return described["meta"], arrays, body[total * DTYPE.itemsize :]


def _split_arrays(prefix: str, split: DatasetSplit) -> Dict[str, np.ndarray]:
    return {
        f"{prefix}.states": split.states,
        f"{prefix}.tendencies": split.tendencies,
        f"{prefix}.metadata": split.metadata,
        f"{prefix}.epochs": split.epochs.astype(np.float64),
        f"{prefix}.t0": split.t0,
    }


def _split_from(prefix: str, arrays: Mapping[str, np.ndarray]) -> DatasetSplit:
    return DatasetSplit(
        states=arrays[f"{prefix}.states"],
        tendencies=arrays[f"{prefix}.tendencies"],
        metadata=arrays[f"{prefix}.metadata"],
        epochs=arrays[f"{prefix}.epochs"].astype(np.int64),
        t0=arrays[f"{prefix}.t0"],
    )


def _encode(kind: str, obj: Any) -> Tuple[bytes, Dict[str, Any]]:
    if kind == "dataset":
        meta = {
            "stats": obj.stats.to_dict(),
            "subsample": obj.subsample,
            "window": obj.window,
            "dt": obj.dt,
            "channel_names": list(obj.channel_names),
            "metadata_names": list(obj.metadata_names),
            "config_digest": obj.config_digest,
        }
        arrays = {"mask": obj.mask, **_split_arrays("train", obj.train), **_split_arrays("test", obj.test)}
        return _pack(meta, arrays), {"train": len(obj.train), "test": len(obj.test)}
    if kind == "checkpoint":
        meta = {
            "config": obj.config.model_dump(mode="json"),
            "seed": obj.seed,
            "epoch": obj.epoch,
            "window": obj.window,
            "stats": None if obj.stats is None else obj.stats.to_dict(),
            "losses": list(obj.losses),
        }
        return _pack(meta, {}, tail=obj.blob), {"variant": obj.config.variant, "epoch": obj.epoch, "stats_digest": obj.stats_digest}
    if kind == "run":
        meta = {
            "provenance": obj.provenance,
            "window": obj.window,
            "dt": obj.dt,
            "seed": obj.seed,
            "start_window": obj.start_window,
            "config_digest": obj.config_digest,
            "cadence": obj.cadence,
            "scaling": obj.scaling,
            "corrector": obj.corrector,
            "channel_names": list(obj.channel_names),
        }
        arrays = {"snapshots": obj.snapshots, "increments": obj.increments, "corrections": obj.corrections}
        header_meta = {"provenance": obj.provenance, "seed": obj.seed, "window": obj.window, "horizon": obj.horizon}
        return _pack(meta, arrays), header_meta
    tables = {str(k): str(v) for k, v in dict(obj).items()}
    return _pack({"tables": tables}, {}), {"tables": sorted(tables)}


def _decode(kind: str, payload: bytes) -> Any:
    meta, arrays, tail = _unpack(payload)
    if kind == "dataset":
        return Dataset(
            train=_split_from("train", arrays),
            test=_split_from("test", arrays),
            stats=NormalizationStats.from_dict(meta["stats"]),
            mask=arrays["mask"],
            subsample=int(meta["subsample"]),
            window=int(meta["window"]),
            dt=float(meta["dt"]),
            channel_names=tuple(meta["channel_names"]),
            metadata_names=tuple(meta["metadata_names"]),
            config_digest=meta["config_digest"],
        )
    if kind == "checkpoint":
        return Checkpoint(
            config=ArchitectureConfig(**meta["config"]),
            seed=int(meta["seed"]),
            epoch=int(meta["epoch"]),
            blob=tail,
            window=int(meta["window"]),
            stats=None if meta["stats"] is None else NormalizationStats.from_dict(meta["stats"]),
            losses=[float(v) for v in meta["losses"]],
        )
    if kind == "run":
        return RunRecord(
            provenance=meta["provenance"],
            snapshots=arrays["snapshots"],
            window=int(meta["window"]),
            dt=float(meta["dt"]),
            seed=int(meta["seed"]),
            start_window=int(meta["start_window"]),
            config_digest=meta["config_digest"],
            cadence=meta["cadence"],
            scaling=meta["scaling"],
            corrector=meta["corrector"],
            channel_names=tuple(meta["channel_names"]),
            increments=arrays.get("increments"),
            corrections=arrays.get("corrections"),
        )
    return dict(meta["tables"])


# ---------------------------------------------------------------------------
# files


def encode_artifact(kind: str, obj: Any, config_digest: str, version: str = FORMAT_VERSION) -> bytes:
    if kind not in MAGIC:
        raise VersionError(f"unknown artifact kind {kind!r}", kind=kind)
    payload, meta = _encode(kind, obj)
    header: Dict[str, Any] = {
        "version": version,
        "kind": kind,
        "config_digest": config_digest,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
        "payload_bytes": len(payload),
        "meta": meta,
    }
    if version == "1.0":
        del header["payload_bytes"]
    line = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC[kind] + b"\n" + line + b"\n" + payload


def save_artifact(path: Union[str, pathlib.Path], kind: str, obj: Any, config_digest: str) -> pathlib.Path:
    p = pathlib.Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    data = encode_artifact(kind, obj, config_digest)
    p.write_bytes(data)
    log.info("store.saved", kind=kind, path=str(p), bytes=len(data))
    return p


def _migrate(raw: Dict[str, Any], payload: bytes) -> Tuple[Dict[str, Any], List[str]]:
    version = str(raw.get("version", ""))
    major, _, minor = version.partition(".")
    current_major, _, _ = FORMAT_VERSION.partition(".")
    if major != current_major or not minor.isdigit():
        raise VersionError(f"artifact format {version!r} cannot be read by format {FORMAT_VERSION}", version=version)
    notes = []
    if version == "1.0":
        raw = {**raw, "payload_bytes": len(payload), "version": FORMAT_VERSION}
        notes.append("migrated 1.0 -> 1.1: payload_bytes taken from the file")
    elif int(minor) > int(FORMAT_VERSION.partition(".")[2]):
        raise VersionError(f"artifact format {version} is newer than {FORMAT_VERSION}", version=version)
    return raw, notes


def decode_artifact(data: bytes, kind: str, expected_digest: Optional[str] = None) -> LoadedArtifact:
    if kind not in MAGIC:
        raise VersionError(f"unknown artifact kind {kind!r}", kind=kind)
    magic, sep1, rest = data.partition(b"\n")
    if magic != MAGIC[kind]:
        raise DigestError(f"not a {kind} artifact", kind=kind)
    line, sep2, payload = rest.partition(b"\n")
    if not (sep1 and sep2):
        raise DigestError(f"{kind} artifact is truncated before its payload", kind=kind)
    try:
        raw = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DigestError(f"{kind} artifact header is corrupt", kind=kind) from exc
    raw, notes = _migrate(raw, payload)
    try:
        header = ArtifactHeader(**raw)
    except ValidationError as exc:
        raise DigestError(f"{kind} artifact header is invalid: {exc.errors()[0]['msg']}", kind=kind) from exc
    if header.kind != kind:
        raise DigestError(f"artifact holds a {header.kind}, {kind} requested", kind=kind)
    if len(payload) != header.payload_bytes:
        raise DigestError(f"{kind} payload has {len(payload)} bytes, header declares {header.payload_bytes}", kind=kind)
    if hashlib.sha256(payload).hexdigest() != header.payload_sha256:
        raise DigestError(f"{kind} payload checksum mismatch", kind=kind)
    if expected_digest is not None and header.config_digest != expected_digest:
        raise DigestError(
            f"{kind} was produced by config {header.config_digest[:12]}, expected {expected_digest[:12]}",
            expected=expected_digest,
            actual=header.config_digest,
        )
    return LoadedArtifact(obj=_decode(kind, payload), header=header, notes=notes)


def load_artifact(path: Union[str, pathlib.Path], kind: str, expected_digest: Optional[str] = None) -> LoadedArtifact:
    p = pathlib.Path(path)
    try:
        data = p.read_bytes()
    except FileNotFoundError as exc:
        raise DigestError(f"{kind} artifact {p} does not exist", path=str(p)) from exc
    loaded = decode_artifact(data, kind, expected_digest)
    for note in loaded.notes:
        log.info("store.migrated", path=str(p), note=note)
    return loaded
