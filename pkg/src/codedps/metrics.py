"""Counters, per-second series, and CSV emission.

Actors increment counters as they work; the runtime flushes a bucket row once
per simulated second.  ``phase`` tracks what the cluster was doing during the
bucket (normal, recovery, ckpt_write, restore) based on coordinator markers.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

CSV_SCHEMA_VERSION = 1

_PHASE_TRANSITIONS = {
    "recovery_start": "recovery",
    "recovery_complete": "normal",
    "ckpt_pause": "ckpt_write",
    "ckpt_resume": "normal",
    "restore_start": "restore",
    "restore_complete": "normal",
    "abort": "aborted",
}


@dataclass
class Bucket:
    t_ms: float
    samples: int
    cum_samples: int
    updates_by_slot: list
    diff_applied: int
    diff_batches: int
    dropped_diffs: int
    degraded_reads: int
    bytes_moved: int
    phase: str


@dataclass
class Metrics:
    num_slots: int
    bucket_ms: float = 1000.0

    samples_total: int = 0
    updates_by_slot: list = field(default_factory=list)
    buffered_updates: int = 0
    diff_applied_total: int = 0
    diff_batches_total: int = 0
    diff_records_sent: int = 0
    dropped_diffs: int = 0
    degraded_reads: int = 0
    lost_pushes: int = 0
    bytes_moved: int = 0
    ckpt_writes: list = field(default_factory=list)
    markers: list = field(default_factory=list)
    buckets: list = field(default_factory=list)
    phase: str = "normal"

    def __post_init__(self):
        if not self.updates_by_slot:
            self.updates_by_slot = [0] * self.num_slots
        self._last = self._snapshot()

    # -- counter hooks -------------------------------------------------------

    def count_samples(self, n: int):
        self.samples_total += n

    def count_update(self, slot: int, buffered: bool = False):
        if buffered:
            self.buffered_updates += 1
        else:
            self.updates_by_slot[slot] += 1

    def count_diff_applied(self):
        self.diff_applied_total += 1

    def count_diff_batch(self, records: int):
        self.diff_batches_total += 1
        self.diff_records_sent += records

    def count_dropped_diff(self, n: int = 1):
        self.dropped_diffs += n

    def count_degraded_read(self):
        self.degraded_reads += 1

    def count_lost_push(self):
        self.lost_pushes += 1

    def count_bytes(self, n: int):
        self.bytes_moved += n

    def count_ckpt_write(self, nbytes: int, duration_ms: float):
        self.ckpt_writes.append((nbytes, duration_ms))

    def marker(self, t_ms: float, label: str):
        self.markers.append((t_ms, label))
        base = label.split(":")[0]
        if base in _PHASE_TRANSITIONS:
            self.phase = _PHASE_TRANSITIONS[base]

    # -- series --------------------------------------------------------------

    def _snapshot(self) -> dict:
        return {
            "samples": self.samples_total,
            "updates": list(self.updates_by_slot),
            "diff_applied": self.diff_applied_total,
            "diff_batches": self.diff_batches_total,
            "dropped": self.dropped_diffs,
            "degraded": self.degraded_reads,
            "bytes": self.bytes_moved,
        }

    def flush_bucket(self, now_ms: float):
        prev, cur = self._last, self._snapshot()
        self.buckets.append(
            Bucket(
                t_ms=now_ms,
                samples=cur["samples"] - prev["samples"],
                cum_samples=cur["samples"],
                updates_by_slot=[c - p for c, p in zip(cur["updates"], prev["updates"])],
                diff_applied=cur["diff_applied"] - prev["diff_applied"],
                diff_batches=cur["diff_batches"] - prev["diff_batches"],
                dropped_diffs=cur["dropped"] - prev["dropped"],
                degraded_reads=cur["degraded"] - prev["degraded"],
                bytes_moved=cur["bytes"] - prev["bytes"],
                phase=self.phase,
            )
        )
        self._last = cur

    def to_csv(self) -> str:
        out = io.StringIO()
        slots = ",".join(f"updates_s{i}" for i in range(self.num_slots))
        out.write(f"# codedps-metrics v{CSV_SCHEMA_VERSION}\n")
        out.write(
            "t_ms,samples,cum_samples," + slots +
            ",diff_applied,diff_batches,dropped_diffs,degraded_reads,bytes_moved,phase\n"
        )
        for b in self.buckets:
            slot_cols = ",".join(str(u) for u in b.updates_by_slot)
            out.write(
                f"{b.t_ms!r},{b.samples},{b.cum_samples},{slot_cols},"
                f"{b.diff_applied},{b.diff_batches},{b.dropped_diffs},"
                f"{b.degraded_reads},{b.bytes_moved},{b.phase}\n"
            )
        return out.getvalue()

    def total_updates(self) -> list:
        return list(self.updates_by_slot)


def load_imbalance(update_counts: list[int]) -> float:
    """Ratio of the most- to least-loaded server by update count."""
    counts = [c for c in update_counts]
    if not counts:
        raise ValueError("empty series")
    if min(counts) <= 0:
        raise ValueError("load imbalance needs nonzero per-server update counts")
    return max(counts) / min(counts)


def estimate_bytes(msg) -> int:
    """Rough wire size of a message for the bytes-moved counter."""
    from . import messages as m

    base = 24
    if isinstance(msg, m.PullRequest):
        return base + 8 * (len(msg.entry_ids) + len(msg.parity_group_ids))
    if isinstance(msg, m.PullReply):
        vec = sum(v.nbytes for v in msg.entries.values())
        vec += sum(v.nbytes for v in msg.parities.values())
        return base + vec + 8 * (len(msg.entries) + len(msg.parities))
    if isinstance(msg, m.PushRequest):
        return base + sum(16 + g.nbytes for _, g, _ in msg.items)
    if isinstance(msg, m.PushParityGradients):
        return base + sum(16 + g.nbytes for _, g, _ in msg.items)
    if isinstance(msg, m.DiffBatch):
        return base + sum(
            24 + d.entry_delta.nbytes + d.state_delta.nbytes for _, d in msg.diffs
        )
    if isinstance(msg, (m.RecoveryReadReply, m.InstallRequest, m.SnapshotReply, m.RestoreRequest)):
        total = base
        for attr in ("members", "parities", "entries"):
            payload = getattr(msg, attr, None)
            if isinstance(payload, dict):
                for v in payload.values():
                    if isinstance(v, tuple):
                        total += sum(getattr(x, "nbytes", 8) for x in v)
                    elif isinstance(v, dict):
                        for vv in v.values():
                            total += sum(getattr(x, "nbytes", 8) for x in vv)
        return total
    return base
