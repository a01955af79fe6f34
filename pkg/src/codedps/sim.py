"""Deterministic discrete-event runtime.

A single priority queue of (time, seq, destination, message) drives every
actor.  Message latency is a configured constant and ties break by insertion
order, so per-channel delivery is FIFO and an entire run is a pure function
of its configuration.  Killing a node silently discards everything addressed
to it from that moment on; the object stays around so tests and oracles can
inspect its final state.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import messages as m
from .codec import CodeParams, ParityLayout, build_layout
from .coordinator import ClusterView, Coordinator, RecoveryAudit
from .checkpoint import CheckpointConfig
from .metrics import Metrics, estimate_bytes
from .optimizers import OptimizerConfig
from .rng import initial_entry_value
from .server import Clock, ParameterServer, SCHEME_ECRM
from .worker import SampleStream, StartIteration, Worker, WorkloadConfig

METRICS_NODE = "__metrics__"


class SimError(RuntimeError):
    pass


@dataclass
class SimParams:
    latency_ms: float = 1.0
    flush_threshold: int = 64
    flush_interval_ms: float = 5.0
    heartbeat_period_ms: float = 100.0
    heartbeat_timeout_periods: int = 3
    iteration_cost_ms: float = 1.0
    extra_push_cost_ms: float = 1.0
    pull_timeout_ms: float = 50.0
    bucket_ms: float = 1000.0
    decode_cost_ms_per_member: float = 0.001
    lock_chunks: int = 1
    worker_stagger_ms: float = 0.013
    record_logs: bool = True
    wire_check: bool = False
    max_sim_ms: float = 3.6e6


class Runtime:
    """Event loop plus the side-effect surface handed to the coordinator."""

    def __init__(self, params: SimParams, metrics: Metrics, stream: SampleStream):
        self.params = params
        self.metrics = metrics
        self.stream = stream
        self.clock = Clock()
        self.nodes: dict[str, object] = {}
        self.dead: set[str] = set()
        self._heap: list = []
        self._seq = 0
        self.stopped: str | None = None

    # -- scheduling ------------------------------------------------------------

    def schedule(self, delay_ms: float, dst: str, msg) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (self.clock.now + delay_ms, self._seq, dst, msg))

    def send(self, src: str, dst: str, msg) -> None:
        self.metrics.count_bytes(estimate_bytes(msg))
        if self.params.wire_check:
            _wire_roundtrip(msg)
        self.schedule(self.params.latency_ms, dst, msg)

    def post(self, dst: str, msg, delay_ms: float = 0.0) -> None:
        self.schedule(delay_ms, dst, msg)

    def kill(self, node: str) -> None:
        if node in self.dead:
            raise ValueError(f"{node} is already dead")
        if node not in self.nodes:
            raise ValueError(f"unknown node {node}")
        self.dead.add(node)

    def kill_at(self, node: str, at_ms: float) -> None:
        self.schedule(max(0.0, at_ms - self.clock.now), "__kill__", node)

    def stop(self, reason: str) -> None:
        self.stopped = reason

    def peek_server(self, node: str):
        return self.nodes[node]

    # -- main loop ---------------------------------------------------------------

    def dispatch_effects(self, origin: str, effects) -> None:
        for dst, payload in effects:
            if dst == "timer":
                delay, msg = payload
                self.schedule(delay, origin, msg)
            else:
                self.send(origin, dst, payload)

    def run(self) -> str:
        params = self.params
        next_bucket = params.bucket_ms
        while self._heap and self.stopped is None:
            t, _, dst, msg = heapq.heappop(self._heap)
            if t > params.max_sim_ms:
                raise SimError(f"simulation exceeded {params.max_sim_ms} ms")
            while t >= next_bucket:
                self.metrics.flush_bucket(next_bucket)
                next_bucket += params.bucket_ms
            self.clock.now = t
            if dst == "__kill__":
                if msg not in self.dead:
                    self.kill(msg)
                continue
            if dst in self.dead:
                continue
            actor = self.nodes.get(dst)
            if actor is None:
                raise SimError(f"message for unknown node {dst}: {msg!r}")
            self.dispatch_effects(dst, actor.handle(msg))
        self.metrics.flush_bucket(self.clock.now)
        if self.stopped is None:
            raise SimError("event queue drained before the run completed")
        return self.stopped


def _wire_roundtrip(msg) -> None:
    from dataclasses import fields

    payload = m.encode_message(msg)
    back = m.decode_message(payload)
    for f in fields(msg):
        a, b = getattr(msg, f.name), getattr(back, f.name)
        if not _wire_equal(a, b):
            raise SimError(f"wire round trip changed field {f.name} of {type(msg).__name__}")


def _wire_equal(a, b) -> bool:
    if isinstance(a, np.ndarray):
        return isinstance(b, np.ndarray) and a.dtype == b.dtype and np.array_equal(a, b)
    if isinstance(a, dict):
        return set(a) == set(b) and all(_wire_equal(a[k], b[k]) for k in a)
    if isinstance(a, (list, tuple)):
        return len(a) == len(b) and all(_wire_equal(x, y) for x, y in zip(a, b))
    if hasattr(a, "__dataclass_fields__"):
        from dataclasses import fields as dfields

        return all(_wire_equal(getattr(a, f.name), getattr(b, f.name)) for f in dfields(a))
    return a == b


@dataclass
class SimCluster:
    """A fully wired simulated cluster, ready to run."""

    runtime: Runtime
    coordinator: Coordinator
    servers: dict                 # node name -> ParameterServer
    workers: dict                 # node name -> Worker
    layout: ParityLayout | None
    stream: SampleStream
    metrics: Metrics
    opt_cfg: OptimizerConfig
    dim: int
    init_seed: int
    scheme: str
    num_slots: int
    spare_names: list = field(default_factory=list)

    def init_fn(self, entry_id: int):
        return initial_entry_value(self.init_seed, entry_id, self.dim)

    def run(self) -> str:
        return self.runtime.run()

    # -- state inspection (oracles and tests) ------------------------------------

    def server_for_slot(self, slot: int) -> ParameterServer:
        node, _ = self.coordinator.view.slots[slot]
        return self.servers[node]

    def all_parity_groups(self):
        for node, server in sorted(self.servers.items()):
            for gid, (vec, state) in sorted(server.shard.parities.items()):
                yield gid, vec, state, node

    def entry_value(self, entry_id: int):
        slot = entry_id // self.layout.entries_per_server
        server = self.server_for_slot(slot)
        return server.shard.entries[entry_id], server.shard.states[entry_id]

    def recovery_audit(self) -> RecoveryAudit:
        """Assemble the offline evidence bundle for the last recovery."""
        coord = self.coordinator
        if not coord.reports or not hasattr(coord.reports[-1], "barrier_event"):
            raise ValueError("no coded recovery has completed")
        report = coord.reports[-1]
        failed_slot = report.failed_slot
        dead_node = None
        for node in self.servers:
            if node in self.runtime.dead and node.startswith("server:"):
                dead_node = node
        origin_log = self.servers[dead_node].shard.applied_log if dead_node else []
        node_of_slot = {}
        parity_logs, member_logs = {}, {}
        for slot in range(self.num_slots):
            node = f"server:{slot}"
            if node in self.servers and node != dead_node:
                node_of_slot[slot] = node
                parity_logs[node] = self.servers[node].shard.parity_log
                member_logs[node] = self.servers[node].shard.applied_log
        return RecoveryAudit(
            failed_slot=failed_slot,
            layout=self.layout,
            opt_cfg=self.opt_cfg,
            dim=self.dim,
            init_fn=self.init_fn,
            recovered_entries=dict(coord.recovered_entries),
            rebuilt_parities=dict(coord.rebuilt_parities),
            origin_log=origin_log,
            parity_logs=parity_logs,
            member_logs=member_logs,
            barrier_event=report.barrier_event,
            chunks=report.chunks,
            first_read_event=report.first_read_event,
        )


def build_cluster(
    *,
    num_servers: int,
    num_workers: int,
    entries_per_server: int,
    dim: int = 16,
    k: int | None = 2,
    scheme: str = SCHEME_ECRM,
    opt_cfg: OptimizerConfig | None = None,
    workload: WorkloadConfig | None = None,
    duration_samples: int = 10_000,
    seed: int = 0,
    num_spares: int = 1,
    params: SimParams | None = None,
    checkpoint_cfg: CheckpointConfig | None = None,
    auto_recover: bool = True,
) -> SimCluster:
    params = params or SimParams()
    opt_cfg = opt_cfg or OptimizerConfig(kind="adagrad")
    total_entries = num_servers * entries_per_server
    workload = workload or WorkloadConfig(total_entries=total_entries, dim=dim, seed=seed)
    if workload.total_entries != total_entries or workload.dim != dim:
        raise ValueError("workload total_entries/dim must match the cluster topology")

    layout = None
    if scheme in (SCHEME_ECRM, "gradient_propagation"):
        if k is None:
            raise ValueError(f"scheme {scheme} needs a code parameter k")
        layout = build_layout(num_servers, entries_per_server, CodeParams(k=k))

    metrics = Metrics(num_slots=num_servers, bucket_ms=params.bucket_ms)
    stream = SampleStream(workload, duration_samples)
    runtime = Runtime(params, metrics, stream)
    init_seed = seed ^ 0x5EED

    def init_fn(entry_id: int):
        return initial_entry_value(init_seed, entry_id, dim)

    servers: dict[str, ParameterServer] = {}
    for slot in range(num_servers):
        node = f"server:{slot}"
        server = ParameterServer(
            node, slot, layout, opt_cfg, dim, init_fn, runtime.clock,
            scheme=scheme, flush_threshold=params.flush_threshold,
            record_logs=params.record_logs, metrics=metrics,
        )
        if layout is None:
            server.host_entries(range(slot * entries_per_server, (slot + 1) * entries_per_server))
        servers[node] = server
        runtime.nodes[node] = server

    spare_names = []
    for i in range(num_spares):
        node = f"spare:{i}"
        spare = ParameterServer(
            node, -1, layout, opt_cfg, dim, init_fn, runtime.clock,
            scheme=scheme, flush_threshold=params.flush_threshold,
            staging=True, record_logs=params.record_logs, metrics=metrics,
        )
        spare_names.append(node)
        servers[node] = spare
        runtime.nodes[node] = spare

    workers: dict[str, Worker] = {}
    for i in range(num_workers):
        node = f"worker:{i}"
        worker = Worker(
            node, stream, layout, workload,
            entries_per_server=entries_per_server, num_slots=num_servers,
            scheme=scheme, iteration_cost_ms=params.iteration_cost_ms,
            extra_push_cost_ms=params.extra_push_cost_ms,
            pull_timeout_ms=params.pull_timeout_ms, metrics=metrics,
        )
        workers[node] = worker
        runtime.nodes[node] = worker

    view = ClusterView(
        slots={s: (f"server:{s}", "up") for s in range(num_servers)},
        spares=list(spare_names),
        heartbeat_period_ms=params.heartbeat_period_ms,
        heartbeat_timeout_periods=params.heartbeat_timeout_periods,
    )
    coordinator = Coordinator(
        view, layout, opt_cfg, sorted(workers), runtime,
        scheme=scheme, lock_chunks=params.lock_chunks,
        decode_cost_ms_per_member=params.decode_cost_ms_per_member,
        checkpoint_cfg=checkpoint_cfg, workload_cfg=workload, dim=dim,
        auto_recover=auto_recover,
    )
    runtime.nodes["coordinator"] = coordinator

    cluster = SimCluster(
        runtime=runtime, coordinator=coordinator, servers=servers, workers=workers,
        layout=layout, stream=stream, metrics=metrics, opt_cfg=opt_cfg, dim=dim,
        init_seed=init_seed, scheme=scheme, num_slots=num_servers,
        spare_names=spare_names,
    )

    runtime.dispatch_effects("coordinator", coordinator.start())
    for i, node in enumerate(sorted(workers)):
        runtime.schedule(params.worker_stagger_ms * (i + 1), node, StartIteration())
    return cluster
