"""Synthetic training clients.

Workers draw Zipf-distributed lookup batches from a shared sample stream,
pull the touched entries, compute seeded pseudo-gradients, and push them to
the hosting servers.  Sample content is a pure function of (seed, sample_id),
which is what makes redo after a checkpoint restore and the per-parameter
replay oracles possible.

When an entry's home server is down, the worker performs a degraded read:
it pulls the group's surviving members plus the parity and subtracts locally.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import messages as m
from . import rng
from .codec import ENTRY_DTYPE, PAD_ENTRY, ParityLayout, decode


@dataclass(frozen=True)
class WorkloadConfig:
    total_entries: int
    batch_size: int = 2048
    zipf_exponent: float = 0.9
    lookups_per_sample: int = 1
    seed: int = 0
    gradient_scale: float = 0.1
    dim: int = 16
    value_dependent_gradients: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.zipf_exponent < 0:
            raise ValueError("zipf exponent must be >= 0")
        if self.gradient_scale <= 0:
            raise ValueError("gradient scale must be > 0")
        if self.total_entries < 1 or self.lookups_per_sample < 1:
            raise ValueError("need at least one entry and one lookup per sample")


@dataclass(frozen=True)
class SampleRecord:
    sample_id: int
    entry_ids: tuple[int, ...]
    grad_seed: int


def zipf_cdf(cfg: WorkloadConfig) -> np.ndarray:
    """Cumulative access distribution over entry ids 0..N-1 (rank order)."""
    ranks = np.arange(1, cfg.total_entries + 1, dtype=np.float64)
    weights = ranks ** -cfg.zipf_exponent
    cdf = np.cumsum(weights)
    cdf /= cdf[-1]
    return cdf


def make_samples(cfg: WorkloadConfig, start: int, count: int, cdf: np.ndarray) -> list[SampleRecord]:
    """Samples ``start .. start+count-1``; pure in (cfg.seed, sample ids)."""
    if count <= 0:
        return []
    L = cfg.lookups_per_sample
    u = np.concatenate(
        [rng.unit_array(L, rng.TAG_LOOKUP, cfg.seed, start + i) for i in range(count)]
    )
    ids = np.searchsorted(cdf, u, side="right")
    out = []
    for i in range(count):
        sid = start + i
        out.append(
            SampleRecord(
                sample_id=sid,
                entry_ids=tuple(int(e) for e in ids[i * L : (i + 1) * L]),
                grad_seed=rng.mix64(rng.TAG_GRAD, cfg.seed, sid),
            )
        )
    return out


def compute_gradient(
    entry_value: np.ndarray, sample: SampleRecord, entry_id: int, cfg: WorkloadConfig
) -> np.ndarray:
    """Deterministic pseudo-gradient, clipped to [-1, 1] per element.

    The default mode ignores the entry value entirely so oracles can replay
    updates without model state; the value-dependent mode scales a seeded
    direction by a logistic response to the current value.
    """
    if not np.all(np.isfinite(entry_value)):
        raise ValueError("non-finite entry value")
    u = rng.unit_array(cfg.dim, sample.grad_seed, entry_id)
    direction = 2.0 * u - 1.0
    if cfg.value_dependent_gradients:
        z = float(np.dot(entry_value.astype(np.float64), direction)) / max(cfg.dim, 1)
        direction = direction * (1.0 / (1.0 + np.exp(-z)))
    grad = np.clip(direction * cfg.gradient_scale, -1.0, 1.0)
    return grad.astype(ENTRY_DTYPE)


class SampleStream:
    """Shared monotonically increasing sample counter with a draw limit.

    ``watermarks`` are (sample_id, callback) pairs fired the first time the
    cursor passes the given id; the harness uses them for cursor-precise
    fault injection and checkpoint triggers.
    """

    def __init__(self, cfg: WorkloadConfig, limit: int):
        self.cfg = cfg
        self.limit = limit
        self.cursor = 0
        self.cdf = zipf_cdf(cfg)
        self._watermarks: list[tuple[int, object]] = []

    def add_watermark(self, sample_id: int, callback):
        self._watermarks.append((sample_id, callback))
        self._watermarks.sort(key=lambda t: t[0])

    def draw(self, want: int) -> list[SampleRecord]:
        take = min(want, self.limit - self.cursor)
        if take <= 0:
            return []
        start = self.cursor
        self.cursor += take
        batch = make_samples(self.cfg, start, take, self.cdf)
        while self._watermarks and self._watermarks[0][0] <= self.cursor:
            _, callback = self._watermarks.pop(0)
            callback()
        return batch

    def reset(self, cursor: int):
        self.cursor = cursor

    @property
    def exhausted(self) -> bool:
        return self.cursor >= self.limit


@dataclass
class WorkerStats:
    samples_completed: int = 0
    degraded_reads: int = 0
    iterations: int = 0


class StartIteration:
    """Self-timer message that begins the next pull/compute/push round."""


@dataclass
class PullTimeout:
    req_id: int


class Worker:
    """Sequential training loop driven by messages and self-timers.

    ``handle`` returns a list of effects: ("<node>", message) sends and
    ("timer", (delay_ms, self_message)) timer requests.  The runtime
    (simulated or threaded) performs them.
    """

    def __init__(
        self,
        name: str,
        stream: SampleStream,
        layout: ParityLayout | None,
        cfg: WorkloadConfig,
        *,
        entries_per_server: int,
        num_slots: int,
        scheme: str = "ecrm",
        iteration_cost_ms: float = 1.0,
        extra_push_cost_ms: float = 0.0,
        pull_timeout_ms: float = 50.0,
        metrics=None,
    ):
        self.name = name
        self.stream = stream
        self.layout = layout
        self.cfg = cfg
        self.entries_per_server = entries_per_server
        self.num_slots = num_slots
        self.scheme = scheme
        self.iteration_cost_ms = iteration_cost_ms
        self.extra_push_cost_ms = extra_push_cost_ms
        self.pull_timeout_ms = pull_timeout_ms
        self.metrics = metrics

        self.slot_map: dict[int, tuple[str, str]] = {
            s: (f"server:{s}", "up") for s in range(num_slots)
        }
        self.rebuilt_groups: dict[int, str] = {}
        self.stats = WorkerStats()
        self.paused = False
        self.pause_token = None
        self.idle = True
        self.halted = False

        self._req_counter = 0
        self._batch: list[SampleRecord] = []
        self._pending: set[int] = set()
        self._values: dict[int, np.ndarray] = {}
        self._parity_values: dict[int, np.ndarray] = {}
        self._degraded: set[int] = set()

    # -- routing ---------------------------------------------------------------

    def _home_slot(self, entry_id: int) -> int:
        return entry_id // self.entries_per_server

    def _slot_status(self, slot: int) -> tuple[str, str]:
        return self.slot_map.get(slot, (f"server:{slot}", "up"))

    def _entry_location(self, entry_id: int) -> tuple[str, bool]:
        """(node, needs_degraded_read) for reading this entry right now."""
        slot = self._home_slot(entry_id)
        node, status = self._slot_status(slot)
        if status == "up" or self.layout is None:
            return node, False
        gid = self.layout.entry_to_group[entry_id][0]
        moved = self.rebuilt_groups.get(gid)
        if moved is not None:
            return moved, False
        return node, True

    def _push_destination(self, entry_id: int) -> str | None:
        slot = self._home_slot(entry_id)
        node, status = self._slot_status(slot)
        if status in ("up", "rebuilding"):
            return node  # a staging shard buffers pushes until rebuilt
        return None      # failed with no replacement registered: update is lost

    # -- iteration -------------------------------------------------------------

    def handle(self, msg) -> list:
        if self.halted:
            return []
        if isinstance(msg, StartIteration):
            return self._begin_iteration()
        if isinstance(msg, m.PullReply):
            return self._on_pull_reply(msg)
        if isinstance(msg, PullTimeout):
            return self._on_timeout(msg)
        if isinstance(msg, m.PauseRequest):
            return self._on_pause(msg)
        if isinstance(msg, m.ResumeRequest):
            return self._on_resume(msg)
        if isinstance(msg, m.ClusterUpdate):
            self.slot_map = dict(msg.slots)
            return []
        if isinstance(msg, m.GroupsRebuilt):
            for gid in msg.group_ids:
                self.rebuilt_groups[gid] = msg.node
            return []
        if isinstance(msg, m.HaltRequest):
            self.halted = True
            return []
        raise TypeError(f"{self.name}: unexpected message {type(msg).__name__}")

    def _begin_iteration(self) -> list:
        if self.paused or self.halted:
            self.idle = True
            return self._ack_pause_if_needed()
        self._batch = self.stream.draw(self.cfg.batch_size)
        if not self._batch:
            self.idle = True
            return [("coordinator", m.IdleNotice(sender=self.name))]
        self.idle = False
        self.stats.iterations += 1
        self._values.clear()
        self._parity_values.clear()
        self._degraded.clear()
        needed = []
        seen = set()
        for sample in self._batch:
            for e in sample.entry_ids:
                if e not in seen:
                    seen.add(e)
                    needed.append(e)
        return self._issue_pulls(needed)

    def _issue_pulls(self, needed: list[int]) -> list:
        """Request every entry in ``needed`` (plus decode fan-out) not yet held."""
        self._pending.clear()
        per_node_entries: dict[str, list[int]] = {}
        per_node_parities: dict[str, list[int]] = {}
        queued: set = set()

        def want_entry(node, e):
            if (node, e) not in queued and e not in self._values:
                queued.add((node, e))
                per_node_entries.setdefault(node, []).append(e)

        for e in needed:
            node, degraded = self._entry_location(e)
            if not degraded:
                want_entry(node, e)
                continue
            self._degraded.add(e)
            self.stats.degraded_reads += 1
            if self.metrics:
                self.metrics.count_degraded_read()
            group = self.layout.groups[self.layout.entry_to_group[e][0]]
            for _, member in group.real_members():
                if member == e:
                    continue
                mnode, mdeg = self._entry_location(member)
                if mdeg:
                    raise RuntimeError("two members of one group unreachable (r=1 limit)")
                want_entry(mnode, member)
            pnode, _ = self._slot_status(group.parity_server)
            moved = self.rebuilt_groups.get(group.group_id)
            pdst = moved if moved is not None else pnode
            if (pdst, group.group_id) not in queued and group.group_id not in self._parity_values:
                queued.add((pdst, group.group_id))
                per_node_parities.setdefault(pdst, []).append(group.group_id)

        sends = []
        for node in sorted(set(per_node_entries) | set(per_node_parities)):
            self._req_counter += 1
            req_id = self._req_counter
            self._pending.add(req_id)
            sends.append(
                (node, m.PullRequest(
                    req_id=req_id, sender=self.name,
                    entry_ids=per_node_entries.get(node, []),
                    parity_group_ids=per_node_parities.get(node, [])))
            )
            sends.append(("timer", (self.pull_timeout_ms, PullTimeout(req_id=req_id))))
        if not self._pending:
            return self._finish_iteration()
        return sends

    def _on_pull_reply(self, msg: m.PullReply) -> list:
        if msg.req_id not in self._pending:
            return []  # reply to an abandoned request
        self._pending.discard(msg.req_id)
        self._values.update(msg.entries)
        self._parity_values.update(msg.parities)
        if self._pending:
            return []
        return self._finish_iteration()

    def _on_timeout(self, msg: PullTimeout) -> list:
        if msg.req_id not in self._pending or not self._batch:
            return []
        # A server went quiet; replan every unresolved read with the current
        # cluster view (degraded decode contexts are rebuilt from scratch).
        self._pending.clear()
        self._degraded.clear()
        needed = []
        seen = set()
        for sample in self._batch:
            for e in sample.entry_ids:
                if e not in seen and e not in self._values:
                    seen.add(e)
                    needed.append(e)
        return self._issue_pulls(needed)

    def _decode_degraded(self):
        for e in sorted(self._degraded):
            gid, missing_slot = self.layout.entry_to_group[e]
            group = self.layout.groups[gid]
            survivors = []
            for slot_idx, member in enumerate(group.member_entry_ids):
                if slot_idx == missing_slot:
                    continue
                if member == PAD_ENTRY:
                    survivors.append(np.zeros(self.cfg.dim, dtype=ENTRY_DTYPE))
                else:
                    survivors.append(self._values[member])
            self._values[e] = decode(self._parity_values[gid], survivors, missing_slot)

    def _finish_iteration(self) -> list:
        self._decode_degraded()
        per_node_pushes: dict[str, list] = {}
        per_node_parity_grads: dict[str, list] = {}
        for sample in self._batch:
            for e in sample.entry_ids:
                grad = compute_gradient(self._values[e], sample, e, self.cfg)
                dst = self._push_destination(e)
                if dst is None:
                    if self.metrics:
                        self.metrics.count_lost_push()
                    continue
                per_node_pushes.setdefault(dst, []).append((e, grad, sample.sample_id))
                if self.scheme == "gradient_propagation" and self.layout is not None:
                    gid = self.layout.entry_to_group[e][0]
                    pnode, pstatus = self._slot_status(self.layout.groups[gid].parity_server)
                    if pstatus == "up":
                        per_node_parity_grads.setdefault(pnode, []).append(
                            (gid, grad, sample.sample_id)
                        )
        sends = []
        for node in sorted(per_node_pushes):
            sends.append((node, m.PushRequest(sender=self.name, items=per_node_pushes[node])))
        for node in sorted(per_node_parity_grads):
            sends.append(
                (node, m.PushParityGradients(sender=self.name, items=per_node_parity_grads[node]))
            )
        done = len(self._batch)
        self.stats.samples_completed += done
        if self.metrics:
            self.metrics.count_samples(done)
        self._batch = []

        delay = self.iteration_cost_ms
        if self.scheme == "gradient_propagation":
            delay += self.extra_push_cost_ms
        sends.append(("timer", (delay, StartIteration())))
        return sends

    # -- pause/resume ------------------------------------------------------------

    def _on_pause(self, msg: m.PauseRequest) -> list:
        self.paused = True
        self.pause_token = msg.token
        if msg.abort_in_flight and self._batch:
            # drop the in-flight iteration: its samples are redone after restore
            self._batch = []
            self._pending.clear()
            self._degraded.clear()
            self.idle = True
        if self.idle:
            return self._ack_pause_if_needed()
        return []  # ack when the in-flight iteration finishes

    def _ack_pause_if_needed(self) -> list:
        if self.paused and self.pause_token is not None:
            token, self.pause_token = self.pause_token, None
            return [("coordinator", m.PauseAck(token=token, sender=self.name))]
        return []

    def _on_resume(self, msg: m.ResumeRequest) -> list:
        self.paused = False
        self.pause_token = None
        if self.idle:
            self.idle = False
            return [("timer", (self.iteration_cost_ms, StartIteration()))]
        return []
