"""Checkpoint baseline: pause-the-world images plus deterministic redo.

Images are little-endian binary files with per-block CRC32 checksums:

    magic "CPCK" | version u16 | optimizer kind u8 | S u32 | k u16 | D u32
    | lr f64 | eps f64 | momentum f64 | cursor u64 | nblocks u32
    then per block: tag u8 | slot i32 | length u64 | crc32 u32 | payload

Block tags: 1 = shard (ids, entry matrix, state matrix), 2 = parity vectors,
3 = serialized parity layout.  A restore of a written image reproduces the
cluster state bit for bit.

Write and read durations follow the declared cost model: bytes divided by a
storage throughput throttle, plus a fixed sync cost.  Redo does not re-run
the cluster; it replays the recorded sample stream in sample order onto the
restored shards, charging time at the observed steady-state throughput.
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .codec import ENTRY_DTYPE, ParityLayout
from .optimizers import ADAGRAD, KINDS, MOMENTUM_SGD, SGD, OptimizerConfig, apply_update
from .worker import WorkloadConfig, make_samples, zipf_cdf

_MAGIC = b"CPCK"
_VERSION = 1
_HEADER = "<4sHBIHIdddQI"
_BLOCK_HEAD = "<BiQI"
_TAG_SHARD = 1
_TAG_PARITY = 2
_TAG_LAYOUT = 3
_KIND_CODE = {SGD: 0, MOMENTUM_SGD: 1, ADAGRAD: 2}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class ImageError(ValueError):
    """Corrupt, truncated, or unsupported checkpoint image."""


@dataclass(frozen=True)
class CheckpointConfig:
    period_samples: int
    throttle_bytes_per_sec: float = 200e6
    sync_cost_ms: float = 50.0
    directory: str = "checkpoints"

    def __post_init__(self):
        if self.period_samples <= 0:
            raise ValueError("checkpoint period must be > 0")
        if self.throttle_bytes_per_sec <= 0:
            raise ValueError("storage throttle must be > 0")


@dataclass
class ClusterSnapshot:
    """Quiescent cluster state: everything an image stores."""

    cursor: int
    dim: int
    opt_cfg: OptimizerConfig
    num_slots: int
    k: int                                  # 0 when the run is uncoded
    shards: dict = field(default_factory=dict)    # slot -> (ids, entries, states)
    parities: dict = field(default_factory=dict)  # slot -> (gids, vecs, states)
    layout_blob: bytes | None = None

    def state_digest(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for slot in sorted(self.shards):
            ids, entries, states = self.shards[slot]
            h.update(np.asarray(ids, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(entries).tobytes())
            h.update(np.ascontiguousarray(states).tobytes())
        for slot in sorted(self.parities):
            gids, vecs, states = self.parities[slot]
            h.update(np.asarray(gids, dtype=np.int64).tobytes())
            h.update(np.ascontiguousarray(vecs).tobytes())
            h.update(np.ascontiguousarray(states).tobytes())
        return h.hexdigest()


def _pack_block(tag: int, slot: int, payload: bytes) -> bytes:
    return struct.pack(_BLOCK_HEAD, tag, slot, len(payload), zlib.crc32(payload)) + payload


def _shard_payload(ids, entries, states) -> bytes:
    ids = np.asarray(ids, dtype=np.int64)
    entries = np.ascontiguousarray(entries, dtype=ENTRY_DTYPE)
    states = np.ascontiguousarray(states, dtype=ENTRY_DTYPE)
    head = struct.pack("<QII", ids.shape[0], entries.shape[1] if entries.size else 0,
                       states.shape[1] if states.size else 0)
    return head + ids.tobytes() + entries.tobytes() + states.tobytes()


def _read_shard_payload(payload: bytes):
    n, d, sd = struct.unpack_from("<QII", payload, 0)
    off = struct.calcsize("<QII")
    ids = np.frombuffer(payload, dtype=np.int64, count=n, offset=off).copy()
    off += n * 8
    entries = np.frombuffer(payload, dtype=ENTRY_DTYPE, count=n * d, offset=off).reshape(n, d).copy()
    off += n * d * 4
    states = np.frombuffer(payload, dtype=ENTRY_DTYPE, count=n * sd, offset=off).reshape(n, sd).copy()
    return ids, entries, states


def image_bytes(snapshot: ClusterSnapshot) -> bytes:
    blocks = []
    for slot in sorted(snapshot.shards):
        blocks.append(_pack_block(_TAG_SHARD, slot, _shard_payload(*snapshot.shards[slot])))
    for slot in sorted(snapshot.parities):
        blocks.append(_pack_block(_TAG_PARITY, slot, _shard_payload(*snapshot.parities[slot])))
    if snapshot.layout_blob is not None:
        blocks.append(_pack_block(_TAG_LAYOUT, -1, snapshot.layout_blob))
    cfg = snapshot.opt_cfg
    header = struct.pack(
        _HEADER, _MAGIC, _VERSION, _KIND_CODE[cfg.kind],
        snapshot.num_slots, snapshot.k, snapshot.dim,
        cfg.learning_rate, cfg.epsilon, cfg.momentum,
        snapshot.cursor, len(blocks),
    )
    return header + b"".join(blocks)


def write_image(snapshot: ClusterSnapshot, path: str) -> int:
    """Serialize to ``path``; returns the byte count (drives the cost model)."""
    blob = image_bytes(snapshot)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(blob)
    return len(blob)


def read_image(path: str) -> ClusterSnapshot:
    with open(path, "rb") as f:
        blob = f.read()
    return parse_image(blob)


def parse_image(blob: bytes) -> ClusterSnapshot:
    head_size = struct.calcsize(_HEADER)
    if len(blob) < head_size:
        raise ImageError("truncated image header")
    magic, version, kind_code, s, k, d, lr, eps, mom, cursor, nblocks = struct.unpack(
        _HEADER, blob[:head_size]
    )
    if magic != _MAGIC:
        raise ImageError("bad image magic")
    if version != _VERSION:
        raise ImageError(f"unsupported image version {version}")
    if kind_code not in _CODE_KIND:
        raise ImageError(f"unknown optimizer code {kind_code}")
    snapshot = ClusterSnapshot(
        cursor=cursor, dim=d,
        opt_cfg=OptimizerConfig(kind=_CODE_KIND[kind_code], learning_rate=lr,
                                epsilon=eps, momentum=mom),
        num_slots=s, k=k,
    )
    off = head_size
    bh = struct.calcsize(_BLOCK_HEAD)
    for _ in range(nblocks):
        if off + bh > len(blob):
            raise ImageError("truncated block header")
        tag, slot, length, crc = struct.unpack_from(_BLOCK_HEAD, blob, off)
        off += bh
        payload = blob[off : off + length]
        if len(payload) != length:
            raise ImageError("truncated block payload")
        if zlib.crc32(payload) != crc:
            raise ImageError(f"checksum mismatch in block tag={tag} slot={slot}")
        off += length
        if tag == _TAG_SHARD:
            snapshot.shards[slot] = _read_shard_payload(payload)
        elif tag == _TAG_PARITY:
            snapshot.parities[slot] = _read_shard_payload(payload)
        elif tag == _TAG_LAYOUT:
            snapshot.layout_blob = payload
        else:
            raise ImageError(f"unknown block tag {tag}")
    return snapshot


def describe_image(path: str) -> dict:
    """Header summary plus checksum verification; raises ImageError if bad."""
    snapshot = read_image(path)
    return {
        "path": path,
        "bytes": os.path.getsize(path),
        "cursor": snapshot.cursor,
        "num_slots": snapshot.num_slots,
        "k": snapshot.k,
        "dim": snapshot.dim,
        "optimizer": snapshot.opt_cfg.kind,
        "shard_blocks": len(snapshot.shards),
        "parity_blocks": len(snapshot.parities),
        "has_layout": snapshot.layout_blob is not None,
        "checksums": "ok",
    }


def transfer_duration_ms(nbytes: int, cfg: CheckpointConfig) -> float:
    return nbytes / cfg.throttle_bytes_per_sec * 1000.0 + cfg.sync_cost_ms


def layout_from_snapshot(snapshot: ClusterSnapshot) -> ParityLayout | None:
    if snapshot.layout_blob is None:
        return None
    return ParityLayout.from_bytes(snapshot.layout_blob)


def replay_samples(
    entries: dict,
    states: dict,
    opt_cfg: OptimizerConfig,
    wl_cfg: WorkloadConfig,
    start: int,
    end: int,
    chunk: int = 4096,
) -> int:
    """Redo samples [start, end) in sample order directly onto the shards.

    Mutates ``entries``/``states`` in place with the same arithmetic the live
    servers use, so the result is bit-identical to a failure-free run reaching
    the same cursor.  Returns the number of samples replayed.
    """
    from .worker import compute_gradient  # local import to avoid cycle confusion

    cdf = zipf_cdf(wl_cfg)
    cursor = start
    while cursor < end:
        take = min(chunk, end - cursor)
        for sample in make_samples(wl_cfg, cursor, take, cdf):
            for e in sample.entry_ids:
                grad = compute_gradient(entries[e], sample, e, wl_cfg)
                entries[e], states[e], _ = apply_update(
                    entries[e], states[e], grad, opt_cfg,
                    entry_id=e, sample_id=sample.sample_id,
                )
        cursor += take
    return end - start
