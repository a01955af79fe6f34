"""Cluster control plane.

The coordinator tracks membership through heartbeats, injects and detects
failures, and drives the two recovery protocols:

* coded recovery: quiesce barrier, then per chunk of affected groups
  lock members (with outbound-delta drain), lock surviving parities, read the
  frozen copies, decode lost entries / re-encode lost parities, install on the
  replacement, unlock.  Training continues throughout; only updates touching
  the locked chunk are buffered.
* checkpoint restore: pause everything, load the latest image, replay the
  sample stream from the image cursor to the pause cursor, install, resume.

It is a single sequential state machine: at most one activity is in flight,
and every ack is matched against the activity's token.

``check_async_reachability`` validates a recovered state offline: every
recovered parameter must equal the fold of exactly the prefix of its own
update sequence whose deltas had reached the parity when the parity copy was
frozen, and rebuilt parities must equal the sum of their members' frozen
values.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import messages as m
from .checkpoint import (
    CheckpointConfig,
    ClusterSnapshot,
    image_bytes,
    parse_image,
    replay_samples,
    transfer_duration_ms,
    write_image,
)
from .codec import ENTRY_DTYPE, PAD_ENTRY, ParityLayout, decode, encode
from .optimizers import OptimizerConfig, replay_diffs, zero_state
from .server import SCHEME_ECRM


@dataclass
class ClusterView:
    """Logical slot assignments plus liveness, as broadcast to everyone."""

    slots: dict                      # slot -> (node, status)
    spares: list                     # idle standby nodes
    heartbeat_period_ms: float = 100.0
    heartbeat_timeout_periods: int = 3

    def serving_nodes(self) -> list[str]:
        return [node for node, status in self.slots.values() if status != "failed"]

    def all_nodes(self) -> list[str]:
        return self.serving_nodes() + list(self.spares)


@dataclass
class RecoveryPlan:
    failed_slot: int
    replacement: str
    chunks: list                     # ordered list of group-id lists
    current_chunk: int = 0
    barrier: str = "draining"        # draining -> drained


@dataclass
class ChunkAudit:
    group_ids: list
    member_freeze: dict = field(default_factory=dict)   # node -> event
    parity_freeze: dict = field(default_factory=dict)   # node -> event


@dataclass
class RecoveryReport:
    failed_slot: int
    replacement: str
    started_ms: float = 0.0
    completed_ms: float = 0.0
    detection_ms: float = 0.0
    barrier_event: int = 0
    first_read_event: int = 0
    last_quiesce_ack_event: int = 0
    chunks: list = field(default_factory=list)          # [ChunkAudit]
    lost_entries: int = 0
    lost_parities: int = 0
    samples_at_start: int = 0
    samples_at_end: int = 0
    aborted: bool = False
    abort_reason: str = ""

    @property
    def duration_ms(self) -> float:
        return self.completed_ms - self.started_ms

    @property
    def samples_during_recovery(self) -> int:
        return self.samples_at_end - self.samples_at_start

    def to_dict(self) -> dict:
        return {
            "kind": "coded_recovery",
            "failed_slot": self.failed_slot,
            "replacement": self.replacement,
            "started_ms": self.started_ms,
            "completed_ms": self.completed_ms,
            "duration_ms": self.duration_ms,
            "detection_ms": self.detection_ms,
            "lost_entries": self.lost_entries,
            "lost_parities": self.lost_parities,
            "chunks": len(self.chunks),
            "samples_during_recovery": self.samples_during_recovery,
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
        }


@dataclass
class RestoreReport:
    failed_slot: int
    image_cursor: int = 0
    resume_cursor: int = 0
    restore_duration_ms: float = 0.0
    redo_duration_ms: float = 0.0
    started_ms: float = 0.0
    completed_ms: float = 0.0

    @property
    def redo_samples(self) -> int:
        return self.resume_cursor - self.image_cursor

    def to_dict(self) -> dict:
        return {
            "kind": "checkpoint_restore",
            "failed_slot": self.failed_slot,
            "image_cursor": self.image_cursor,
            "resume_cursor": self.resume_cursor,
            "redo_samples": self.redo_samples,
            "restore_duration_ms": self.restore_duration_ms,
            "redo_duration_ms": self.redo_duration_ms,
            "duration_ms": self.completed_ms - self.started_ms,
        }


# self-timer messages
class Tick:
    pass


@dataclass
class ChunkDecoded:
    token: int


@dataclass
class CheckpointDue:
    pass


@dataclass
class StorageDone:
    token: int


class Coordinator:
    """Sequential controller; interacts with the cluster only via messages.

    ``runtime`` supplies the side effects a controller legitimately owns:
    ``post(dst, msg, delay_ms)``, ``kill(node)``, ``stop(reason)``, the shared
    sample stream, the metrics sink, and the shared event clock.
    """

    def __init__(
        self,
        view: ClusterView,
        layout: ParityLayout | None,
        opt_cfg: OptimizerConfig,
        worker_names: list[str],
        runtime,
        *,
        scheme: str = SCHEME_ECRM,
        lock_chunks: int = 1,
        decode_cost_ms_per_member: float = 0.001,
        checkpoint_cfg: CheckpointConfig | None = None,
        workload_cfg=None,
        dim: int = 16,
        auto_recover: bool = True,
    ):
        self.view = view
        self.layout = layout
        self.opt_cfg = opt_cfg
        self.workers = list(worker_names)
        self.rt = runtime
        self.scheme = scheme
        self.lock_chunks = lock_chunks
        self.decode_cost_ms_per_member = decode_cost_ms_per_member
        self.ckpt_cfg = checkpoint_cfg
        self.workload_cfg = workload_cfg
        self.dim = dim
        self.auto_recover = auto_recover

        self._token = 0
        self._hb_seq = 0
        self.last_seen: dict[str, float] = {node: 0.0 for node in view.all_nodes()}
        self.injected: set[int] = set()
        self.failed_slots: set[int] = set()
        self.dead_nodes: set[str] = set()
        self.idle_workers: set[str] = set()
        self.halted = False

        self.activity: dict | None = None
        self.recovery: RecoveryPlan | None = None
        self.report: RecoveryReport | None = None
        self.reports: list = []
        self.recovered_entries: dict = {}
        self.rebuilt_parities: dict = {}
        self.run_started_ms = 0.0
        self.pause_time_ms = 0.0
        self._pause_started: float | None = None
        self.latest_image: bytes | None = None
        self.latest_image_path: str | None = None
        self._ckpt_counter = 0
        self._pending_failure: int | None = None
        self._end_requested = False

    # -- public API -------------------------------------------------------------

    def inject_failure(self, slot: int, at_time_ms: float):
        """Schedule a hard failure of the node serving ``slot``."""
        if slot not in self.view.slots:
            raise ValueError(f"unknown server slot {slot}")
        if slot in self.injected:
            raise ValueError(f"slot {slot} already scheduled to fail")
        self.injected.add(slot)
        node = self.view.slots[slot][0]
        self.rt.kill_at(node, at_time_ms)

    def start(self) -> list:
        self.run_started_ms = self.rt.clock.now
        out = [("timer", (0.0, Tick()))]
        if self.scheme == "ckpt" and self.ckpt_cfg is not None:
            # cursor-0 image so a failure before the first periodic write has
            # something to restore from; nothing has trained yet, so no pause
            self._write_initial_image()
            self.rt.stream.add_watermark(
                self.ckpt_cfg.period_samples, lambda: self.rt.post("coordinator", CheckpointDue())
            )
        return out

    # -- dispatch ----------------------------------------------------------------

    def handle(self, msg) -> list:
        if self.halted:
            return []
        name = type(msg).__name__
        handler = getattr(self, "_on_" + name, None)
        if handler is None:
            raise TypeError(f"coordinator: unexpected message {name}")
        return handler(msg)

    def _next_token(self) -> int:
        self._token += 1
        return self._token

    # -- heartbeats and failure detection ------------------------------------------

    def _on_Tick(self, _msg) -> list:
        now = self.rt.clock.now
        out = []
        self._hb_seq += 1
        for node in self.view.all_nodes():
            if node not in self.dead_nodes:
                out.append((node, m.Heartbeat(seq=self._hb_seq)))
        timeout = self.view.heartbeat_period_ms * self.view.heartbeat_timeout_periods
        for node in list(self.last_seen):
            if node in self.dead_nodes:
                continue
            if now - self.last_seen[node] > timeout and now > timeout:
                out.extend(self._node_suspected(node))
        out.append(("timer", (self.view.heartbeat_period_ms, Tick())))
        out.extend(self._maybe_finish_run())
        return out

    def _on_HeartbeatReply(self, msg: m.HeartbeatReply) -> list:
        self.last_seen[msg.sender] = self.rt.clock.now
        return []

    def _node_suspected(self, node: str) -> list:
        self.dead_nodes.add(node)
        slot = None
        for s, (n, status) in self.view.slots.items():
            if n == node and status != "failed":
                slot = s
                break
        if slot is None:
            # a standby died; it simply leaves the spare pool
            if node in self.view.spares:
                self.view.spares.remove(node)
            return []
        return self._slot_failed(slot)

    def _slot_failed(self, slot: int) -> list:
        now = self.rt.clock.now
        self.failed_slots.add(slot)
        self.rt.metrics.marker(now, f"failure_detected:slot{slot}")
        if self.recovery is not None or (self.activity or {}).get("kind", "") in (
            "restore_pause", "restore_read", "redo_wait", "restore_install",
        ):
            return self._abort(f"second failure (slot {slot}) during recovery")
        if self.activity is not None:
            # busy with a checkpoint write or the end barrier; handle after
            self._pending_failure = slot
            return []
        return self._dispatch_failure(slot)

    def _dispatch_failure(self, slot: int) -> list:
        if self.scheme == SCHEME_ECRM and self.auto_recover:
            return self._begin_coded_recovery(slot)
        if self.scheme == "ckpt":
            return self._begin_restore(slot)
        # uncoded, no checkpoints: the shard is simply gone
        node = self.view.slots[slot][0]
        self.view.slots[slot] = (node, "failed")
        return self._broadcast_view()

    def _check_pending_failure(self) -> list:
        if self._pending_failure is None or self.activity is not None or self.halted:
            return []
        slot, self._pending_failure = self._pending_failure, None
        return self._dispatch_failure(slot)

    def _abort(self, reason: str) -> list:
        self.halted = True
        if self.report is not None:
            self.report.aborted = True
            self.report.abort_reason = reason
            self.report.completed_ms = self.rt.clock.now
            self.reports.append(self.report)
        self.rt.metrics.marker(self.rt.clock.now, "abort")
        out = [(node, m.HaltRequest(reason=reason)) for node in self.view.all_nodes()]
        out += [(w, m.HaltRequest(reason=reason)) for w in self.workers]
        self.rt.stop(f"unrecoverable: {reason}")
        return out

    def _broadcast_view(self) -> list:
        update = m.ClusterUpdate(slots=dict(self.view.slots))
        targets = [n for n in self.view.all_nodes() if n not in self.dead_nodes]
        return [(t, update) for t in targets] + [(w, update) for w in self.workers]

    # -- coded recovery ---------------------------------------------------------------

    def _begin_coded_recovery(self, slot: int) -> list:
        now = self.rt.clock.now
        if not self.view.spares:
            return self._abort("no standby server available")
        replacement = self.view.spares.pop(0)
        old_node = self.view.slots[slot][0]
        self.view.slots[slot] = (replacement, "rebuilding")

        groups = self.layout.affected_groups(slot)
        n_chunks = max(1, min(self.lock_chunks, len(groups)))
        size = math.ceil(len(groups) / n_chunks)
        chunks = [groups[i : i + size] for i in range(0, len(groups), size)]
        self.recovery = RecoveryPlan(failed_slot=slot, replacement=replacement, chunks=chunks)
        self.report = RecoveryReport(
            failed_slot=slot,
            replacement=replacement,
            detection_ms=now,
            started_ms=now,
            samples_at_start=self.rt.metrics.samples_total,
        )
        self.recovered_entries = {}
        self.rebuilt_parities = {}
        self.rt.metrics.marker(now, "recovery_start")
        out = self._broadcast_view()

        token = self._next_token()
        targets = [n for n in self.view.serving_nodes() if n not in self.dead_nodes]
        self.activity = {"kind": "quiesce", "token": token, "await": set(targets)}
        out += [(t, m.QuiesceRequest(token=token)) for t in targets]
        return out

    def _on_QuiesceAck(self, msg: m.QuiesceAck) -> list:
        act = self.activity
        if not act or act["token"] != msg.token or act["kind"] not in ("quiesce", "final_quiesce"):
            return []
        act["await"].discard(msg.sender)
        if act["await"]:
            return []
        if act["kind"] == "final_quiesce":
            self.activity = None
            self.rt.metrics.marker(self.rt.clock.now, "run_complete")
            self.rt.stop("completed")
            return []
        self.recovery.barrier = "drained"
        self.report.barrier_event = self.rt.clock.tick()
        self.report.last_quiesce_ack_event = self.report.barrier_event
        self.rt.metrics.marker(self.rt.clock.now, "barrier_drained")
        return self._start_chunk()

    def _chunk_groups(self) -> list:
        return self.recovery.chunks[self.recovery.current_chunk]

    def _chunk_nodes(self) -> tuple[list, list]:
        """(member-host nodes, surviving parity-host nodes) for current chunk."""
        member_nodes = set()
        parity_nodes = set()
        failed = self.recovery.failed_slot
        for gid in self._chunk_groups():
            g = self.layout.groups[gid]
            for _, e in g.real_members():
                s = self.layout.entry_home(e)
                if s != failed:
                    member_nodes.add(self.view.slots[s][0])
            if g.parity_server != failed:
                parity_nodes.add(self.view.slots[g.parity_server][0])
        return sorted(member_nodes), sorted(parity_nodes)

    def _start_chunk(self) -> list:
        plan = self.recovery
        audit = ChunkAudit(group_ids=list(self._chunk_groups()))
        self.report.chunks.append(audit)
        member_nodes, _ = self._chunk_nodes()
        token = self._next_token()
        self.activity = {
            "kind": "lock_members",
            "token": token,
            "await": set(member_nodes),
            "audit": audit,
        }
        req = m.LockMembersRequest(token=token, group_ids=self._chunk_groups())
        return [(n, req) for n in member_nodes]

    def _on_LockAck(self, msg: m.LockAck) -> list:
        act = self.activity
        if not act or act["token"] != msg.token:
            return []
        act["await"].discard(msg.sender)
        audit: ChunkAudit = act["audit"]
        if act["kind"] == "lock_members":
            audit.member_freeze[msg.sender] = msg.freeze_event
            if act["await"]:
                return []
            _, parity_nodes = self._chunk_nodes()
            if not parity_nodes:
                return self._start_reads(audit)
            token = self._next_token()
            self.activity = {
                "kind": "lock_parity",
                "token": token,
                "await": set(parity_nodes),
                "audit": audit,
            }
            req = m.LockParityRequest(token=token, group_ids=self._chunk_groups())
            return [(n, req) for n in parity_nodes]
        if act["kind"] == "lock_parity":
            audit.parity_freeze[msg.sender] = msg.freeze_event
            if act["await"]:
                return []
            return self._start_reads(audit)
        return []

    def _start_reads(self, audit: ChunkAudit) -> list:
        member_nodes, parity_nodes = self._chunk_nodes()
        targets = sorted(set(member_nodes) | set(parity_nodes))
        token = self._next_token()
        if self.report.first_read_event == 0:
            self.report.first_read_event = self.rt.clock.tick()
        self.activity = {
            "kind": "read",
            "token": token,
            "await": set(targets),
            "audit": audit,
            "members": {},
            "parities": {},
        }
        req = m.RecoveryReadRequest(token=token, group_ids=self._chunk_groups())
        return [(n, req) for n in targets]

    def _on_RecoveryReadReply(self, msg: m.RecoveryReadReply) -> list:
        act = self.activity
        if not act or act["kind"] != "read" or act["token"] != msg.token:
            return []
        act["await"].discard(msg.sender)
        for gid, slots in msg.members.items():
            act["members"].setdefault(gid, {}).update(slots)
        for gid, pv in msg.parities.items():
            act["parities"][gid] = pv
        if act["await"]:
            return []
        return self._decode_chunk(act)

    def _decode_chunk(self, act: dict) -> list:
        failed = self.recovery.failed_slot
        entries: dict = {}
        parities: dict = {}
        lost_members = 0
        state_dim = self.opt_cfg.state_dim(self.dim)
        for gid in self._chunk_groups():
            g = self.layout.groups[gid]
            have = act["members"].get(gid, {})
            if g.parity_server == failed:
                vecs, states = [], []
                for slot_idx, e in enumerate(g.member_entry_ids):
                    if e == PAD_ENTRY:
                        vecs.append(np.zeros(self.dim, dtype=ENTRY_DTYPE))
                        states.append(np.zeros(state_dim, dtype=ENTRY_DTYPE))
                    else:
                        _, vec, st = have[slot_idx]
                        vecs.append(vec)
                        states.append(st)
                pvec = encode(vecs)
                pstate = encode(states) if state_dim else np.zeros(0, dtype=ENTRY_DTYPE)
                parities[gid] = (pvec, pstate)
                continue
            # one member was lost; decode it and its optimizer state
            lost_slot = None
            lost_entry = None
            for slot_idx, e in g.real_members():
                if self.layout.entry_home(e) == failed:
                    lost_slot, lost_entry = slot_idx, e
                    break
            if lost_entry is None:
                continue
            pvec, pstate = act["parities"][gid]
            surv_vecs, surv_states = [], []
            for slot_idx, e in enumerate(g.member_entry_ids):
                if slot_idx == lost_slot:
                    continue
                if e == PAD_ENTRY:
                    surv_vecs.append(np.zeros(self.dim, dtype=ENTRY_DTYPE))
                    surv_states.append(np.zeros(state_dim, dtype=ENTRY_DTYPE))
                else:
                    _, vec, st = have[slot_idx]
                    surv_vecs.append(vec)
                    surv_states.append(st)
            vec = decode(pvec, surv_vecs, lost_slot)
            st = decode(pstate, surv_states, lost_slot) if state_dim else np.zeros(0, ENTRY_DTYPE)
            entries[lost_entry] = (vec, st)
            lost_members += 1

        self.report.lost_entries += lost_members
        self.report.lost_parities += len(parities)
        self.recovered_entries.update(entries)
        self.rebuilt_parities.update(parities)

        k = self.layout.params.k
        decode_delay = self.decode_cost_ms_per_member * k * (lost_members + len(parities))
        token = self._next_token()
        self.activity = {
            "kind": "decode",
            "token": token,
            "audit": act["audit"],
            "entries": entries,
            "parities": parities,
        }
        return [("timer", (decode_delay, ChunkDecoded(token=token)))]

    def _on_ChunkDecoded(self, msg: ChunkDecoded) -> list:
        act = self.activity
        if not act or act["kind"] != "decode" or act["token"] != msg.token:
            return []
        token = self._next_token()
        self.activity = {"kind": "install", "token": token, "audit": act["audit"],
                         "parities": act["parities"]}
        return [(self.recovery.replacement,
                 m.InstallRequest(token=token, entries=act["entries"], parities=act["parities"]))]

    def _on_InstallAck(self, msg: m.InstallAck) -> list:
        act = self.activity
        if not act or act["kind"] != "install" or act["token"] != msg.token:
            return []
        member_nodes, parity_nodes = self._chunk_nodes()
        targets = sorted(set(member_nodes) | set(parity_nodes) | {self.recovery.replacement})
        parity_moved = {gid: self.recovery.replacement for gid in act["parities"]}
        token = self._next_token()
        self.activity = {"kind": "unlock", "token": token, "await": set(targets),
                         "audit": act["audit"], "parity_moved": parity_moved}
        req = m.UnlockRequest(token=token, group_ids=self._chunk_groups(),
                              parity_moved=parity_moved)
        return [(n, req) for n in targets]

    def _on_UnlockAck(self, msg: m.UnlockAck) -> list:
        act = self.activity
        if not act or act["kind"] != "unlock" or act["token"] != msg.token:
            return []
        act["await"].discard(msg.sender)
        if act["await"]:
            return []
        out = []
        rebuilt = m.GroupsRebuilt(group_ids=list(self._chunk_groups()),
                                  node=self.view.slots[self.recovery.failed_slot][0])
        out += [(w, rebuilt) for w in self.workers]
        self.rt.metrics.marker(self.rt.clock.now, f"chunk_done:{self.recovery.current_chunk}")
        self.recovery.current_chunk += 1
        if self.recovery.current_chunk < len(self.recovery.chunks):
            out += self._start_chunk()
            return out
        # recovery complete: replacement becomes the slot's serving node
        slot = self.recovery.failed_slot
        node = self.view.slots[slot][0]
        self.view.slots[slot] = (node, "up")
        self.report.completed_ms = self.rt.clock.now
        self.report.samples_at_end = self.rt.metrics.samples_total
        self.reports.append(self.report)
        self.rt.metrics.marker(self.rt.clock.now, "recovery_complete")
        self.recovery = None
        self.activity = None
        out += self._broadcast_view()
        out += self._maybe_finish_run()
        return out

    # -- checkpoint write ----------------------------------------------------------------

    def _on_CheckpointDue(self, _msg) -> list:
        if self.activity is not None or self.halted:
            return []
        token = self._next_token()
        self.activity = {"kind": "ckpt_pause", "token": token, "await": set(self.workers)}
        self._pause_started = self.rt.clock.now
        self.rt.metrics.marker(self.rt.clock.now, "ckpt_pause")
        return [(w, m.PauseRequest(token=token)) for w in self.workers]

    def _on_PauseAck(self, msg: m.PauseAck) -> list:
        act = self.activity
        if not act or act["token"] != msg.token or not act["kind"].endswith("pause"):
            return []
        act["await"].discard(msg.sender)
        if act["await"]:
            return []
        if act["kind"] == "ckpt_pause":
            return self._snapshot_cluster()
        if act["kind"] == "restore_pause":
            return self._perform_restore()
        return []

    def _snapshot_cluster(self) -> list:
        token = self._next_token()
        targets = [n for n in self.view.serving_nodes() if n not in self.dead_nodes]
        self.activity = {"kind": "snapshot", "token": token, "await": set(targets),
                         "shards": {}, "parities": {}}
        return [(t, m.SnapshotRequest(token=token)) for t in targets]

    def _on_SnapshotReply(self, msg: m.SnapshotReply) -> list:
        act = self.activity
        if not act or act["kind"] != "snapshot" or act["token"] != msg.token:
            return []
        act["await"].discard(msg.sender)
        slot = self._slot_of_node(msg.sender)
        ids = sorted(msg.entries)
        entries = np.stack([msg.entries[e][0] for e in ids]) if ids else np.zeros((0, self.dim), ENTRY_DTYPE)
        states = np.stack([msg.entries[e][1] for e in ids]) if ids else np.zeros((0, 0), ENTRY_DTYPE)
        act["shards"][slot] = (np.array(ids, dtype=np.int64), entries, states)
        gids = sorted(msg.parities)
        if gids:
            pv = np.stack([msg.parities[g][0] for g in gids])
            ps = np.stack([msg.parities[g][1] for g in gids])
            act["parities"][slot] = (np.array(gids, dtype=np.int64), pv, ps)
        if act["await"]:
            return []
        return self._write_snapshot(act)

    def _slot_of_node(self, node: str) -> int:
        for s, (n, _) in self.view.slots.items():
            if n == node:
                return s
        raise KeyError(f"node {node} serves no slot")

    def _write_snapshot(self, act: dict) -> list:
        snapshot = ClusterSnapshot(
            cursor=self.rt.stream.cursor,
            dim=self.dim,
            opt_cfg=self.opt_cfg,
            num_slots=len(self.view.slots),
            k=self.layout.params.k if self.layout else 0,
            shards=act["shards"],
            parities=act["parities"],
            layout_blob=self.layout.to_bytes() if self.layout else None,
        )
        blob = image_bytes(snapshot)
        self.latest_image = blob
        self._ckpt_counter += 1
        path = None
        if self.ckpt_cfg is not None and self.ckpt_cfg.directory:
            path = f"{self.ckpt_cfg.directory}/image_{self._ckpt_counter:04d}.ckpt"
            write_image(snapshot, path)
            self.latest_image_path = path
        duration = transfer_duration_ms(len(blob), self.ckpt_cfg)
        self.rt.metrics.count_ckpt_write(len(blob), duration)
        token = self._next_token()
        self.activity = {"kind": "ckpt_write", "token": token}
        return [("timer", (duration, StorageDone(token=token)))]

    def _on_StorageDone(self, msg: StorageDone) -> list:
        act = self.activity
        if not act or act["token"] != msg.token:
            return []
        if act["kind"] == "ckpt_write":
            self.activity = None
            self._account_pause_end()
            self.rt.metrics.marker(self.rt.clock.now, "ckpt_resume")
            if self.ckpt_cfg is not None:
                nxt = self.rt.stream.cursor + self.ckpt_cfg.period_samples
                if nxt < self.rt.stream.limit:
                    self.rt.stream.add_watermark(
                        nxt, lambda: self.rt.post("coordinator", CheckpointDue())
                    )
            self.idle_workers.clear()
            out = [(w, m.ResumeRequest(token=0)) for w in self.workers]
            out += self._check_pending_failure()
            out += self._maybe_finish_run()
            return out
        if act["kind"] == "restore_read":
            return self._install_restored(act)
        if act["kind"] == "redo_wait":
            return self._finish_restore(act)
        return []

    def _write_initial_image(self) -> None:
        """Synchronous cursor-0 image before any training (no pause to charge)."""
        shards, parities = {}, {}
        for slot in sorted(self.view.slots):
            node = self.view.slots[slot][0]
            server = self.rt.peek_server(node)
            ids = sorted(server.shard.entries)
            entries = np.stack([server.shard.entries[e] for e in ids]) if ids else np.zeros((0, self.dim), ENTRY_DTYPE)
            states = np.stack([server.shard.states[e] for e in ids]) if ids else np.zeros((0, 0), ENTRY_DTYPE)
            shards[slot] = (np.array(ids, dtype=np.int64), entries, states)
        snapshot = ClusterSnapshot(
            cursor=0, dim=self.dim, opt_cfg=self.opt_cfg,
            num_slots=len(self.view.slots), k=0, shards=shards, parities=parities,
        )
        self.latest_image = image_bytes(snapshot)

    # -- checkpoint restore ------------------------------------------------------------------

    def _begin_restore(self, slot: int) -> list:
        now = self.rt.clock.now
        if not self.view.spares:
            return self._abort("no standby server available")
        replacement = self.view.spares.pop(0)
        self.view.slots[slot] = (replacement, "rebuilding")
        self._pause_started = now
        self.rt.metrics.marker(now, "restore_start")
        token = self._next_token()
        self.activity = {
            "kind": "restore_pause", "token": token, "await": set(self.workers),
            "slot": slot,
            "report": RestoreReport(failed_slot=slot, started_ms=now),
        }
        out = self._broadcast_view()
        out += [(w, m.PauseRequest(token=token, abort_in_flight=True)) for w in self.workers]
        return out

    def _perform_restore(self) -> list:
        act = self.activity
        report: RestoreReport = act["report"]
        if self.latest_image is None:
            return self._abort("no checkpoint image available")
        snapshot = parse_image(self.latest_image)
        report.image_cursor = snapshot.cursor
        report.resume_cursor = self.rt.stream.cursor
        report.restore_duration_ms = transfer_duration_ms(len(self.latest_image), self.ckpt_cfg)
        token = self._next_token()
        self.activity = {"kind": "restore_read", "token": token, "snapshot": snapshot,
                         "report": report, "slot": act["slot"]}
        return [("timer", (report.restore_duration_ms, StorageDone(token=token)))]

    def _install_restored(self, act: dict) -> list:
        snapshot: ClusterSnapshot = act["snapshot"]
        report: RestoreReport = act["report"]
        # redo lost iterations by replaying the recorded stream in sample order
        entries: dict = {}
        states: dict = {}
        for slot, (ids, evecs, svecs) in snapshot.shards.items():
            for i, e in enumerate(ids):
                entries[int(e)] = evecs[i]
                states[int(e)] = svecs[i]
        replayed = replay_samples(
            entries, states, self.opt_cfg, self.workload_cfg,
            snapshot.cursor, report.resume_cursor,
        )
        rate = self._steady_rate_samples_per_ms()
        report.redo_duration_ms = replayed / rate if rate > 0 else 0.0
        token = self._next_token()
        self.activity = {"kind": "redo_wait", "token": token, "report": report,
                         "entries": entries, "states": states, "snapshot": snapshot}
        return [("timer", (report.redo_duration_ms, StorageDone(token=token)))]

    def _steady_rate_samples_per_ms(self) -> float:
        now = self.rt.clock.now
        active = now - self.run_started_ms - self.pause_time_ms
        if self._pause_started is not None:
            active -= now - self._pause_started
        if active <= 0:
            return 0.0
        return self.rt.metrics.samples_total / active

    def _finish_restore(self, act: dict) -> list:
        report: RestoreReport = act["report"]
        snapshot: ClusterSnapshot = act["snapshot"]
        entries, states = act["entries"], act["states"]
        token = self._next_token()
        targets = []
        sends = []
        for slot, (ids, _, _) in sorted(snapshot.shards.items()):
            node = self.view.slots[slot][0]
            payload = {int(e): (entries[int(e)], states[int(e)]) for e in ids}
            sends.append((node, m.RestoreRequest(token=token, entries=payload, parities={})))
            targets.append(node)
        self.activity = {"kind": "restore_install", "token": token, "await": set(targets),
                         "report": report, "slot": act["slot"]}
        return sends

    def _on_RestoreAck(self, msg: m.RestoreAck) -> list:
        act = self.activity
        if not act or act["kind"] != "restore_install" or act["token"] != msg.token:
            return []
        act["await"].discard(msg.sender)
        if act["await"]:
            return []
        report: RestoreReport = act["report"]
        slot = act["slot"]
        node = self.view.slots[slot][0]
        self.view.slots[slot] = (node, "up")
        report.completed_ms = self.rt.clock.now
        self.reports.append(report)
        self.rt.stream.reset(report.resume_cursor)
        self.activity = None
        self._account_pause_end()
        self.rt.metrics.marker(self.rt.clock.now, "restore_complete")
        self.idle_workers.clear()
        out = self._broadcast_view()
        out += [(w, m.ResumeRequest(token=0)) for w in self.workers]
        out += self._check_pending_failure()
        out += self._maybe_finish_run()
        return out

    def _account_pause_end(self):
        if self._pause_started is not None:
            self.pause_time_ms += self.rt.clock.now - self._pause_started
            self._pause_started = None

    # -- end of run -----------------------------------------------------------------------

    def _on_IdleNotice(self, msg: m.IdleNotice) -> list:
        self.idle_workers.add(msg.sender)
        return self._maybe_finish_run()

    def _maybe_finish_run(self) -> list:
        if (
            self._end_requested
            or self.halted
            or self.activity is not None
            or self.recovery is not None
            or not self.rt.stream.exhausted
            or self.idle_workers < set(self.workers)
        ):
            return []
        self._end_requested = True
        token = self._next_token()
        targets = [n for n in self.view.serving_nodes() if n not in self.dead_nodes]
        self.activity = {"kind": "final_quiesce", "token": token, "await": set(targets)}
        return [(t, m.QuiesceRequest(token=token)) for t in targets]


# -- recovered-state validation ---------------------------------------------------


@dataclass
class RecoveryAudit:
    """Everything the offline reachability check needs about one recovery."""

    failed_slot: int
    layout: ParityLayout
    opt_cfg: OptimizerConfig
    dim: int
    init_fn: object                       # entry_id -> initial float32 vector
    recovered_entries: dict               # entry_id -> (vector, state)
    rebuilt_parities: dict                # group_id -> (vector, state)
    origin_log: list                      # dead server's applied records
    parity_logs: dict                     # node -> [ParityRecord]
    member_logs: dict                     # node -> [AppliedRecord]
    barrier_event: int
    chunks: list                          # [ChunkAudit]
    first_read_event: int = 0


@dataclass
class ReachabilityVerdict:
    passed: bool
    failures: list = field(default_factory=list)
    checked_entries: int = 0
    checked_parities: int = 0

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        body = f"{status}: {self.checked_entries} entries, {self.checked_parities} parities"
        if self.failures:
            body += "\n" + "\n".join("  - " + f for f in self.failures[:20])
        return body


def _fold32(initial: np.ndarray, deltas: list[np.ndarray]) -> np.ndarray:
    return replay_diffs(initial, deltas)


def check_async_reachability(audit: RecoveryAudit, tolerance: float = 1e-3) -> ReachabilityVerdict:
    """Validate that a recovered state is one asynchronous training could reach.

    For every decoded entry: the set of its update deltas that had reached the
    parity by the time the parity copy was frozen must form a gap-free prefix
    of the entry's own update sequence, and the decoded value (and optimizer
    state) must equal the fold of exactly that prefix.  Rebuilt parities must
    equal the sum of their members' values at the members' freeze points.
    Cross-parameter interleaving is deliberately unconstrained.
    """
    verdict = ReachabilityVerdict(passed=True)
    layout = audit.layout
    state_dim = audit.opt_cfg.state_dim(audit.dim)

    # index the dead server's updates per entry, in its log order
    per_entry: dict[int, list] = {}
    for rec in audit.origin_log:
        per_entry.setdefault(rec.entry_id, []).append(rec)

    freeze_by_group: dict[int, dict] = {}
    for chunk in audit.chunks:
        for gid in chunk.group_ids:
            freeze_by_group[gid] = {
                "member": chunk.member_freeze,
                "parity": chunk.parity_freeze,
            }

    for entry_id in sorted(audit.recovered_entries):
        vec, state = audit.recovered_entries[entry_id]
        gid, _ = layout.entry_to_group[entry_id]
        group = layout.groups[gid]
        parity_node = None
        for node in audit.parity_logs:
            if node.endswith(f":{group.parity_server}"):
                parity_node = node
        plog = audit.parity_logs.get(parity_node, [])
        freeze = freeze_by_group.get(gid, {}).get("parity", {})
        freeze_event = freeze.get(parity_node, audit.barrier_event)
        applied = {
            rec.seq
            for rec in plog
            if rec.entry_id == entry_id and rec.event <= freeze_event
        }
        updates = per_entry.get(entry_id, [])
        prefix_len = len(applied)
        prefix = updates[:prefix_len]
        if {rec.seq for rec in prefix} != applied:
            verdict.passed = False
            verdict.failures.append(
                f"entry {entry_id}: parity-applied updates are not a prefix "
                f"of its update sequence ({sorted(applied)[:8]}...)"
            )
            continue
        init_vec, init_state = audit.init_fn(entry_id), np.zeros(state_dim, dtype=ENTRY_DTYPE)
        expect_vec = _fold32(init_vec, [r.entry_delta for r in prefix])
        expect_state = _fold32(init_state, [r.state_delta for r in prefix])
        verdict.checked_entries += 1
        if np.max(np.abs(vec.astype(np.float64) - expect_vec.astype(np.float64)), initial=0.0) > tolerance:
            verdict.passed = False
            any_prefix = _matches_any_prefix(vec, init_vec, updates, tolerance)
            verdict.failures.append(
                f"entry {entry_id}: decoded value differs from its barrier prefix "
                f"({'matches a different prefix' if any_prefix else 'matches no prefix at all'})"
            )
        if state_dim and np.max(
            np.abs(state.astype(np.float64) - expect_state.astype(np.float64)), initial=0.0
        ) > tolerance:
            verdict.passed = False
            verdict.failures.append(f"entry {entry_id}: decoded optimizer state is wrong")

    for gid in sorted(audit.rebuilt_parities):
        pvec, pstate = audit.rebuilt_parities[gid]
        group = layout.groups[gid]
        freeze = freeze_by_group.get(gid, {}).get("member", {})
        vec_sum = np.zeros(audit.dim, dtype=np.float64)
        state_sum = np.zeros(state_dim, dtype=np.float64)
        for _, entry_id in group.real_members():
            home = layout.entry_home(entry_id)
            node = None
            for cand in audit.member_logs:
                if cand.endswith(f":{home}"):
                    node = cand
            cutoff = freeze.get(node, audit.barrier_event)
            deltas = [
                r
                for r in audit.member_logs.get(node, [])
                if r.entry_id == entry_id and r.event <= cutoff
            ]
            val = _fold32(audit.init_fn(entry_id), [r.entry_delta for r in deltas])
            stval = _fold32(np.zeros(state_dim, dtype=ENTRY_DTYPE), [r.state_delta for r in deltas])
            vec_sum += val.astype(np.float64)
            state_sum += stval.astype(np.float64)
        verdict.checked_parities += 1
        if np.max(np.abs(pvec.astype(np.float64) - vec_sum), initial=0.0) > tolerance:
            verdict.passed = False
            verdict.failures.append(f"group {gid}: rebuilt parity != sum of frozen members")
        if state_dim and np.max(np.abs(pstate.astype(np.float64) - state_sum), initial=0.0) > tolerance:
            verdict.passed = False
            verdict.failures.append(f"group {gid}: rebuilt parity state != sum of member states")

    return verdict


def _matches_any_prefix(vec, init_vec, updates, tolerance) -> bool:
    value = init_vec.astype(ENTRY_DTYPE)
    if np.max(np.abs(vec - value), initial=0.0) <= tolerance:
        return True
    for rec in updates:
        value = (value.astype(np.float64) + rec.entry_delta).astype(ENTRY_DTYPE)
        if np.max(np.abs(vec.astype(np.float64) - value.astype(np.float64)), initial=0.0) <= tolerance:
            return True
    return False
