"""Parameter-server state machine.

A server hosts one logical shard (entries plus optimizer state), the parity
vectors assigned to it by the layout, and an append-only log of applied
updates used by the replay oracles.  It processes exactly one message at a
time and communicates only through the messages it returns, so the same class
runs unchanged under the deterministic event loop and under real threads.

Parity maintenance: after applying an optimizer step to an entry, the exact
before/after deltas are queued toward the group's parity host and folded in
there.  Queued deltas are batched per destination and flushed when a batch
fills or a flush tick arrives.

Recovery locks: while a group is member-locked, pushes to its entries are
applied to a buffered copy and their deltas are withheld; the base copy stays
frozen for recovery reads.  While a group is parity-locked, incoming deltas
are buffered.  Unlocking folds buffers into the base in arrival order and
releases withheld deltas.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from . import messages as m
from .codec import ENTRY_DTYPE, PAD_ENTRY, ParityLayout, encode
from .optimizers import OptimizerConfig, UpdateDiff, apply_diff, apply_update, zero_state

SCHEME_NONE = "none"
SCHEME_ECRM = "ecrm"
SCHEME_GRADPROP = "gradient_propagation"


class AppliedRecord(NamedTuple):
    event: int
    time_ms: float
    entry_id: int
    seq: int
    sample_id: int
    entry_delta: np.ndarray
    state_delta: np.ndarray


class ParityRecord(NamedTuple):
    event: int
    time_ms: float
    group_id: int
    entry_id: int
    seq: int
    sample_id: int


@dataclass
class Shard:
    entries: dict = field(default_factory=dict)    # entry_id -> float32 vector
    states: dict = field(default_factory=dict)     # entry_id -> optimizer state
    parities: dict = field(default_factory=dict)   # group_id -> (vector, state)
    applied_log: list = field(default_factory=list)
    parity_log: list = field(default_factory=list)


@dataclass
class BufferOverlay:
    """Buffered state held only while recovery locks cover this server."""

    member_locked: set = field(default_factory=set)    # group ids
    parity_locked: set = field(default_factory=set)
    view: dict = field(default_factory=dict)           # entry_id -> (vec, state)
    pending: dict = field(default_factory=dict)        # entry_id -> [UpdateDiff]
    parity_view: dict = field(default_factory=dict)    # group_id -> (vec, state)
    pending_parity: dict = field(default_factory=dict) # group_id -> [(UpdateDiff, origin)]

    @property
    def active(self) -> bool:
        return bool(self.member_locked or self.parity_locked)


class Clock:
    """Simulated time plus a global event counter for total ordering."""

    def __init__(self):
        self.now = 0.0
        self._events = 0

    def tick(self) -> int:
        self._events += 1
        return self._events


class ParameterServer:
    def __init__(
        self,
        name: str,
        slot: int,
        layout: ParityLayout | None,
        opt_cfg: OptimizerConfig,
        dim: int,
        init_fn: Callable[[int], np.ndarray],
        clock: Clock,
        scheme: str = SCHEME_ECRM,
        flush_threshold: int = 64,
        staging: bool = False,
        record_logs: bool = True,
        metrics=None,
    ):
        self.name = name
        self.slot = slot
        self.layout = layout
        self.opt_cfg = opt_cfg
        self.dim = dim
        self.init_fn = init_fn
        self.clock = clock
        self.scheme = scheme
        self.flush_threshold = flush_threshold
        self.staging = staging
        self.record_logs = record_logs
        self.metrics = metrics

        self.shard = Shard()
        self.overlay = BufferOverlay()
        self.slot_map: dict[int, tuple[str, str]] = {}
        self.rebuilt_groups: dict[int, str] = {}       # group -> node hosting rebuilt parity
        self.installed_groups: set[int] = set()
        self.staged_pushes: dict[int, list] = {}       # entry_id -> [(grad, sample_id)]
        self.base_snapshot: dict[int, tuple] = {}      # install/restore baselines for oracles

        self.diff_seq = 0
        self._batch_counter = 0
        self.outbound: dict[str, list] = {}            # dst node -> [(group_id, diff)]
        self.outstanding: dict[int, str] = {}          # batch_id -> dst node
        self._drain_token: int | None = None
        self._drain_kind = None                        # "quiesce" | "lock"
        self._drain_waiting: set[int] = set()
        self._held_pushes: list[m.PushRequest] = []
        self._freeze_event = 0
        self.halted = False

        if not staging:
            self._populate()

    # -- construction ---------------------------------------------------------

    def _populate(self):
        if self.layout is not None:
            for e in self.layout.entries_of(self.slot):
                self.shard.entries[e] = self.init_fn(e)
                self.shard.states[e] = zero_state(self.opt_cfg, self.dim)
            if self.scheme in (SCHEME_ECRM, SCHEME_GRADPROP):
                for gid in self.layout.parity_groups_of(self.slot):
                    self.shard.parities[gid] = self._encode_initial(gid)
        else:
            # no coding: slot hosting is implied by contiguous entry ids
            pass

    def _encode_initial(self, gid: int):
        group = self.layout.groups[gid]
        vecs, states = [], []
        for e in group.member_entry_ids:
            if e == PAD_ENTRY:
                vecs.append(np.zeros(self.dim, dtype=ENTRY_DTYPE))
            else:
                vecs.append(self.init_fn(e))
            states.append(zero_state(self.opt_cfg, self.dim))
        pstate = encode(states) if self.opt_cfg.state_dim(self.dim) else states[0]
        return encode(vecs), pstate

    def host_entries(self, entry_ids):
        """Populate a shard directly (uncoded clusters without a layout)."""
        for e in entry_ids:
            self.shard.entries[e] = self.init_fn(e)
            self.shard.states[e] = zero_state(self.opt_cfg, self.dim)

    def initial_basis(self, entry_id: int) -> tuple[np.ndarray, np.ndarray]:
        """Baseline the applied log replays from: install/restore snapshot or init."""
        snap = self.base_snapshot.get(entry_id)
        if snap is not None:
            return snap
        return self.init_fn(entry_id), zero_state(self.opt_cfg, self.dim)

    # -- dispatch -------------------------------------------------------------

    def handle(self, msg) -> list[tuple[str, object]]:
        if self.halted:
            return []
        handler = getattr(self, "_on_" + type(msg).__name__)
        return handler(msg)

    # -- reads ----------------------------------------------------------------

    def _entry_view(self, entry_id: int) -> np.ndarray:
        if entry_id in self.overlay.view:
            return self.overlay.view[entry_id][0]
        try:
            return self.shard.entries[entry_id]
        except KeyError:
            raise KeyError(f"{self.name}: unknown entry id {entry_id}") from None

    def _parity_view(self, gid: int) -> np.ndarray:
        if gid in self.overlay.parity_view:
            return self.overlay.parity_view[gid][0]
        try:
            return self.shard.parities[gid][0]
        except KeyError:
            raise KeyError(f"{self.name}: group {gid} parity not hosted here") from None

    def _on_PullRequest(self, msg: m.PullRequest):
        entries = {e: self._entry_view(e) for e in msg.entry_ids}
        parities = {g: self._parity_view(g) for g in msg.parity_group_ids}
        return [(msg.sender, m.PullReply(req_id=msg.req_id, entries=entries, parities=parities))]

    # -- writes ---------------------------------------------------------------

    def _next_seq(self) -> int:
        self.diff_seq += 1
        return self.diff_seq

    def _on_PushRequest(self, msg: m.PushRequest):
        if self._drain_kind == "quiesce":
            self._held_pushes.append(msg)
            return []
        out = []
        for entry_id, grad, sample_id in msg.items:
            out.extend(self._push_one(entry_id, grad, sample_id))
        return out

    def _push_one(self, entry_id, grad, sample_id):
        gid = None
        if self.layout is not None:
            gid = self.layout.entry_to_group[entry_id][0]
        # A staging shard buffers pushes until the entry's group has been
        # installed and unlocked, so replayed updates keep arrival order.
        if self.staging and gid not in self.installed_groups:
            self.staged_pushes.setdefault(entry_id, []).append((grad, sample_id))
            return []

        if gid is not None and gid in self.overlay.member_locked:
            vec, state = self.overlay.view.get(entry_id) or (
                self.shard.entries[entry_id],
                self.shard.states[entry_id],
            )
            new_vec, new_state, diff = apply_update(
                vec, state, grad, self.opt_cfg,
                entry_id=entry_id, seq=self._next_seq(), sample_id=sample_id,
            )
            self.overlay.view[entry_id] = (new_vec, new_state)
            self.overlay.pending.setdefault(entry_id, []).append(diff)
            if self.metrics:
                self.metrics.count_update(self.slot, buffered=True)
            return []

        vec = self.shard.entries.get(entry_id)
        if vec is None:
            raise KeyError(f"{self.name}: push to unknown entry {entry_id}")
        new_vec, new_state, diff = apply_update(
            vec, self.shard.states[entry_id], grad, self.opt_cfg,
            entry_id=entry_id, seq=self._next_seq(), sample_id=sample_id,
        )
        self.shard.entries[entry_id] = new_vec
        self.shard.states[entry_id] = new_state
        self._log_applied(diff)
        if self.metrics:
            self.metrics.count_update(self.slot)
        if self.scheme == SCHEME_ECRM and gid is not None:
            return self._enqueue_diff(gid, diff)
        return []

    def _log_applied(self, diff: UpdateDiff):
        if self.record_logs:
            self.shard.applied_log.append(
                AppliedRecord(
                    self.clock.tick(), self.clock.now,
                    diff.entry_id, diff.seq, diff.sample_id,
                    diff.entry_delta, diff.state_delta,
                )
            )

    # -- difference propagation ------------------------------------------------

    def _parity_destination(self, gid: int) -> str | None:
        """Node to receive deltas for ``gid``; None while the parity is gone."""
        moved = self.rebuilt_groups.get(gid)
        if moved is not None:
            return moved
        slot = self.layout.groups[gid].parity_server
        node, status = self.slot_map.get(slot, (f"server:{slot}", "up"))
        if status == "up":
            return node
        return None

    def _enqueue_diff(self, gid: int, diff: UpdateDiff):
        dst = self._parity_destination(gid)
        if dst is None:
            if self.metrics:
                self.metrics.count_dropped_diff()
            return []
        queue = self.outbound.setdefault(dst, [])
        queue.append((gid, diff))
        if len(queue) >= self.flush_threshold:
            return self._flush(dst)
        return []

    def _flush(self, dst: str):
        queue = self.outbound.pop(dst, None)
        if not queue:
            return []
        if not self._node_alive(dst):
            if self.metrics:
                self.metrics.count_dropped_diff(len(queue))
            return []
        self._batch_counter += 1
        batch_id = self._batch_counter
        self.outstanding[batch_id] = dst
        if self.metrics:
            self.metrics.count_diff_batch(len(queue))
        return [(dst, m.DiffBatch(batch_id=batch_id, origin=self.name, diffs=queue))]

    def _flush_all(self):
        out = []
        for dst in list(self.outbound):
            out.extend(self._flush(dst))
        return out

    def _node_alive(self, node: str) -> bool:
        for mapped, status in self.slot_map.values():
            if mapped == node:
                return status != "failed"
        return True

    def _on_FlushTick(self, _msg):
        return self._flush_all()

    def _on_DiffBatch(self, msg: m.DiffBatch):
        for gid, diff in msg.diffs:
            if gid in self.overlay.parity_locked:
                vec, state = self.overlay.parity_view[gid]
                self.overlay.parity_view[gid] = apply_diff(vec, state, diff)
                self.overlay.pending_parity.setdefault(gid, []).append(diff)
            else:
                self._apply_parity_diff(gid, diff)
        return [(msg.origin, m.DiffBatchAck(batch_id=msg.batch_id))]

    def _apply_parity_diff(self, gid: int, diff: UpdateDiff):
        try:
            vec, state = self.shard.parities[gid]
        except KeyError:
            raise KeyError(f"{self.name}: delta for group {gid} not hosted here") from None
        self.shard.parities[gid] = apply_diff(vec, state, diff)
        if self.record_logs:
            self.shard.parity_log.append(
                ParityRecord(self.clock.tick(), self.clock.now,
                             gid, diff.entry_id, diff.seq, diff.sample_id)
            )
        if self.metrics:
            self.metrics.count_update(self.slot)
            self.metrics.count_diff_applied()

    def _on_DiffBatchAck(self, msg: m.DiffBatchAck):
        self.outstanding.pop(msg.batch_id, None)
        self._drain_waiting.discard(msg.batch_id)
        return self._check_drained()

    # -- naive parity maintenance (gradient forwarding) --------------------------

    def _on_PushParityGradients(self, msg: m.PushParityGradients):
        for gid, grad, sample_id in msg.items:
            vec, state = self.shard.parities[gid]
            new_vec, new_state, _ = apply_update(vec, state, grad, self.opt_cfg)
            self.shard.parities[gid] = (new_vec, new_state)
            if self.metrics:
                self.metrics.count_update(self.slot)
        return []

    # -- quiesce barrier ---------------------------------------------------------

    def _on_QuiesceRequest(self, msg: m.QuiesceRequest):
        out = self._flush_all()
        self._drain_token = msg.token
        self._drain_kind = "quiesce"
        self._prune_dead_outstanding()
        self._drain_waiting = set(self.outstanding)
        return out + self._check_drained()

    def _check_drained(self):
        if self._drain_kind is None or self._drain_waiting:
            return []
        token, kind = self._drain_token, self._drain_kind
        self._drain_token = self._drain_kind = None
        if kind == "quiesce":
            out = [("coordinator", m.QuiesceAck(token=token, sender=self.name))]
            held, self._held_pushes = self._held_pushes, []
            for push in held:
                out.extend(self._on_PushRequest(push))
            return out
        return [("coordinator", m.LockAck(token=token, sender=self.name,
                                          freeze_event=self._freeze_event))]

    def _prune_dead_outstanding(self):
        for batch_id, dst in list(self.outstanding.items()):
            if not self._node_alive(dst):
                del self.outstanding[batch_id]

    # -- recovery locks ------------------------------------------------------------

    def _on_LockMembersRequest(self, msg: m.LockMembersRequest):
        already = set(msg.group_ids) & self.overlay.member_locked
        if already:
            raise RuntimeError(f"{self.name}: groups {sorted(already)} already locked")
        self.overlay.member_locked.update(msg.group_ids)
        self._freeze_event = self.clock.tick()
        out = self._flush_all()
        self._drain_token = msg.token
        self._drain_kind = "lock"
        self._prune_dead_outstanding()
        self._drain_waiting = set(self.outstanding)
        return out + self._check_drained()

    def _on_LockParityRequest(self, msg: m.LockParityRequest):
        for gid in msg.group_ids:
            if gid in self.overlay.parity_locked:
                raise RuntimeError(f"{self.name}: parity {gid} already locked")
            if gid in self.shard.parities:
                vec, state = self.shard.parities[gid]
                self.overlay.parity_locked.add(gid)
                self.overlay.parity_view[gid] = (vec, state)
        return [("coordinator", m.LockAck(token=msg.token, sender=self.name,
                                          freeze_event=self.clock.tick()))]

    def _on_RecoveryReadRequest(self, msg: m.RecoveryReadRequest):
        members: dict = {}
        parities: dict = {}
        for gid in msg.group_ids:
            group = self.layout.groups[gid]
            if gid in self.shard.parities:
                if gid not in self.overlay.parity_locked:
                    raise RuntimeError(f"{self.name}: recovery read of unlocked parity {gid}")
                parities[gid] = self.shard.parities[gid]
            slots = {}
            for slot_idx, e in group.real_members():
                if e in self.shard.entries:
                    if gid not in self.overlay.member_locked:
                        raise RuntimeError(f"{self.name}: recovery read of unlocked group {gid}")
                    slots[slot_idx] = (e, self.shard.entries[e], self.shard.states[e])
            if slots:
                members[gid] = slots
        return [("coordinator", m.RecoveryReadReply(
            token=msg.token, sender=self.name, members=members, parities=parities))]

    def _on_InstallRequest(self, msg: m.InstallRequest):
        for e, (vec, state) in msg.entries.items():
            self.shard.entries[e] = vec
            self.shard.states[e] = state
            self.base_snapshot[e] = (vec, state)
        for gid, (vec, state) in msg.parities.items():
            self.shard.parities[gid] = (vec, state)
        return [("coordinator", m.InstallAck(token=msg.token))]

    def _on_UnlockRequest(self, msg: m.UnlockRequest):
        out = []
        for gid, node in msg.parity_moved.items():
            self.rebuilt_groups[gid] = node
        for gid in msg.group_ids:
            if gid in self.overlay.member_locked:
                out.extend(self._unlock_member_group(gid))
            if gid in self.overlay.parity_locked:
                self._unlock_parity_group(gid)
            if self.staging:
                self.installed_groups.add(gid)
                out.extend(self._apply_staged(gid))
        out.append(("coordinator", m.UnlockAck(token=msg.token, sender=self.name)))
        return out

    def _unlock_member_group(self, gid: int):
        self.overlay.member_locked.discard(gid)
        out = []
        group = self.layout.groups[gid]
        for _, e in group.real_members():
            if e not in self.shard.entries:
                continue
            view = self.overlay.view.pop(e, None)
            if view is not None:
                self.shard.entries[e], self.shard.states[e] = view
            for diff in self.overlay.pending.pop(e, ()):  # arrival order
                self._log_applied(diff)
                if self.metrics:
                    self.metrics.count_update(self.slot)
                if self.scheme == SCHEME_ECRM:
                    out.extend(self._enqueue_diff(gid, diff))
        return out

    def _unlock_parity_group(self, gid: int):
        self.overlay.parity_locked.discard(gid)
        view = self.overlay.parity_view.pop(gid, None)
        pending = self.overlay.pending_parity.pop(gid, ())
        for diff in pending:
            # view already holds the folds; log and count them now
            if self.record_logs:
                self.shard.parity_log.append(
                    ParityRecord(self.clock.tick(), self.clock.now,
                                 gid, diff.entry_id, diff.seq, diff.sample_id)
                )
            if self.metrics:
                self.metrics.count_update(self.slot)
                self.metrics.count_diff_applied()
        if view is not None:
            self.shard.parities[gid] = view

    def _apply_staged(self, gid: int):
        out = []
        group = self.layout.groups[gid]
        for _, e in group.real_members():
            for grad, sample_id in self.staged_pushes.pop(e, ()):
                out.extend(self._push_one(e, grad, sample_id))
        return out

    # -- cluster membership ----------------------------------------------------------

    def _on_ClusterUpdate(self, msg: m.ClusterUpdate):
        self.slot_map = dict(msg.slots)
        failed_nodes = {node for node, status in self.slot_map.values() if status == "failed"}
        for batch_id, dst in list(self.outstanding.items()):
            if dst in failed_nodes:
                del self.outstanding[batch_id]
                self._drain_waiting.discard(batch_id)
        for dst in failed_nodes:
            dropped = self.outbound.pop(dst, None)
            if dropped and self.metrics:
                self.metrics.count_dropped_diff(len(dropped))
        return self._check_drained()

    def _on_GroupsRebuilt(self, msg: m.GroupsRebuilt):
        for gid in msg.group_ids:
            self.rebuilt_groups[gid] = msg.node
        return []

    def _on_Heartbeat(self, msg: m.Heartbeat):
        return [("coordinator", m.HeartbeatReply(seq=msg.seq, sender=self.name))]

    def _on_HaltRequest(self, msg: m.HaltRequest):
        self.halted = True
        return []

    # -- checkpoint support -------------------------------------------------------------

    def _on_SnapshotRequest(self, msg: m.SnapshotRequest):
        entries = {e: (self.shard.entries[e], self.shard.states[e]) for e in self.shard.entries}
        return [("coordinator", m.SnapshotReply(
            token=msg.token, sender=self.name,
            entries=entries, parities=dict(self.shard.parities)))]

    def _on_RestoreRequest(self, msg: m.RestoreRequest):
        self.shard = Shard()
        self.overlay = BufferOverlay()
        self.outbound.clear()
        self.outstanding.clear()
        self.staged_pushes.clear()
        self.base_snapshot = {}
        for e, (vec, state) in msg.entries.items():
            self.shard.entries[e] = vec
            self.shard.states[e] = state
            self.base_snapshot[e] = (vec, state)
        self.shard.parities = dict(msg.parities)
        return [("coordinator", m.RestoreAck(token=msg.token, sender=self.name))]
