"""Wire records exchanged between workers, servers, and the coordinator.

Messages are plain dataclasses passed by reference inside a single process.
Every type is registered with a schema (field name -> value kind) and can be
serialized to a JSON-compatible dict and back without loss: vectors travel as
base64-encoded little-endian raw bytes, so a round trip is bit-exact.  The
simulator can be run with wire checking enabled, which round-trips every
message in flight through the codec and asserts equality.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Any

import numpy as np

from .optimizers import UpdateDiff

SCHEMA_VERSION = 1

_REGISTRY: dict[str, type] = {}


class SchemaError(ValueError):
    """Malformed or unknown wire record."""


def message(cls):
    """Register a dataclass as a wire record."""
    cls = dataclass(cls)
    _REGISTRY[cls.__name__] = cls
    return cls


def _pack_value(v: Any) -> Any:
    if isinstance(v, np.ndarray):
        return {
            "__nd__": True,
            "dtype": v.dtype.str,
            "data": base64.b64encode(np.ascontiguousarray(v).tobytes()).decode("ascii"),
        }
    if isinstance(v, UpdateDiff):
        return {
            "__diff__": True,
            "entry_id": v.entry_id,
            "seq": v.seq,
            "sample_id": v.sample_id,
            "entry_delta": _pack_value(v.entry_delta),
            "state_delta": _pack_value(v.state_delta),
        }
    if is_dataclass(v) and type(v).__name__ in _REGISTRY:
        return encode_message(v)
    if isinstance(v, dict):
        return {"__map__": True, "items": [[_pack_value(k), _pack_value(x)] for k, x in v.items()]}
    if isinstance(v, (list, tuple)):
        return [_pack_value(x) for x in v]
    if isinstance(v, (int, float, str, bool)) or v is None:
        return v
    raise SchemaError(f"cannot serialize value of type {type(v).__name__}")


def _unpack_value(v: Any) -> Any:
    if isinstance(v, dict):
        if v.get("__nd__"):
            return np.frombuffer(base64.b64decode(v["data"]), dtype=np.dtype(v["dtype"])).copy()
        if v.get("__diff__"):
            return UpdateDiff(
                entry_id=v["entry_id"],
                seq=v["seq"],
                sample_id=v["sample_id"],
                entry_delta=_unpack_value(v["entry_delta"]),
                state_delta=_unpack_value(v["state_delta"]),
            )
        if v.get("__map__"):
            return {_unpack_value(k): _unpack_value(x) for k, x in v["items"]}
        if "__type__" in v:
            return decode_message(v)
    if isinstance(v, list):
        return [_unpack_value(x) for x in v]
    return v


def encode_message(msg) -> dict:
    name = type(msg).__name__
    if name not in _REGISTRY:
        raise SchemaError(f"unregistered message type {name}")
    return {
        "__type__": name,
        "__version__": SCHEMA_VERSION,
        "fields": {f.name: _pack_value(getattr(msg, f.name)) for f in fields(msg)},
    }


def decode_message(payload: dict):
    if payload.get("__version__") != SCHEMA_VERSION:
        raise SchemaError(f"unsupported schema version {payload.get('__version__')}")
    name = payload.get("__type__")
    cls = _REGISTRY.get(name)
    if cls is None:
        raise SchemaError(f"unknown message type {name!r}")
    raw = payload["fields"]
    expected = {f.name for f in fields(cls)}
    if set(raw) != expected:
        raise SchemaError(f"{name}: field mismatch, got {sorted(raw)}")
    return cls(**{k: _unpack_value(v) for k, v in raw.items()})


# --- worker <-> server -----------------------------------------------------

@message
class PullRequest:
    req_id: int
    sender: str
    entry_ids: list[int]
    parity_group_ids: list[int] = field(default_factory=list)


@message
class PullReply:
    req_id: int
    entries: dict          # entry_id -> vector
    parities: dict         # group_id -> parity vector


@message
class PushRequest:
    sender: str
    items: list            # (entry_id, gradient, sample_id) in sample order


@message
class PushParityGradients:
    # naive parity maintenance: raw gradients forwarded to the parity host
    sender: str
    items: list            # (group_id, gradient, sample_id)


# --- server <-> server ------------------------------------------------------

@message
class DiffBatch:
    batch_id: int
    origin: str
    diffs: list            # (group_id, UpdateDiff)


@message
class DiffBatchAck:
    batch_id: int


@message
class FlushTick:
    pass


# --- coordinator protocol ---------------------------------------------------

@message
class Heartbeat:
    seq: int


@message
class HeartbeatReply:
    seq: int
    sender: str


@message
class QuiesceRequest:
    token: int


@message
class QuiesceAck:
    token: int
    sender: str


@message
class LockMembersRequest:
    token: int
    group_ids: list[int]


@message
class LockParityRequest:
    token: int
    group_ids: list[int]


@message
class LockAck:
    token: int
    sender: str
    freeze_event: int = 0   # event counter at which this server froze its copies


@message
class RecoveryReadRequest:
    token: int
    group_ids: list[int]


@message
class RecoveryReadReply:
    token: int
    sender: str
    members: dict          # group_id -> {slot: (entry_id, vector, state)}
    parities: dict         # group_id -> (vector, state)


@message
class InstallRequest:
    token: int
    entries: dict          # entry_id -> (vector, state)
    parities: dict         # group_id -> (vector, state)


@message
class InstallAck:
    token: int


@message
class UnlockRequest:
    token: int
    group_ids: list[int]
    parity_moved: dict = field(default_factory=dict)   # group_id -> node with rebuilt parity


@message
class UnlockAck:
    token: int
    sender: str


@message
class ClusterUpdate:
    # slot -> (node name, status); statuses: up / failed / rebuilding
    slots: dict


@message
class GroupsRebuilt:
    group_ids: list[int]
    node: str


@message
class HaltRequest:
    reason: str


# --- pause / snapshot (checkpoint baseline, end of run) ----------------------

@message
class PauseRequest:
    token: int
    abort_in_flight: bool = False   # drop the current iteration (restore path)


@message
class IdleNotice:
    sender: str


@message
class PauseAck:
    token: int
    sender: str


@message
class ResumeRequest:
    token: int


@message
class SnapshotRequest:
    token: int


@message
class SnapshotReply:
    token: int
    sender: str
    entries: dict          # entry_id -> (vector, state)
    parities: dict         # group_id -> (vector, state)


@message
class RestoreRequest:
    token: int
    epoch: int
    entries: dict
    parities: dict


@message
class RestoreAck:
    token: int
    sender: str
