"""Stateful optimizers and difference-based parity maintenance.

``apply_update`` performs one optimizer step on an entry and returns, besides
the new entry and state, an :class:`UpdateDiff` holding the exact before/after
deltas.  Parity hosts keep their copies current by adding those deltas
(:func:`apply_diff`); they never rerun the optimizer.

Entries and optimizer state are stored as float32; arithmetic runs in float64
and results are rounded back to storage precision.  Deltas are kept in
float64 so replaying a diff sequence reproduces the stored values exactly.

``run_parity_scheme_comparison`` demonstrates why the obvious alternative of
forwarding raw gradients to parity hosts corrupts parities once the optimizer
carries per-parameter state: the parity's accumulated state diverges from any
single member's state, so steps computed from it are wrong.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codec import ENTRY_DTYPE, encode

SGD = "sgd"
MOMENTUM_SGD = "momentum_sgd"
ADAGRAD = "adagrad"
KINDS = (SGD, MOMENTUM_SGD, ADAGRAD)


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    learning_rate: float = 0.1
    epsilon: float = 1e-8          # adagrad denominator floor
    momentum: float = 0.9          # momentum_sgd decay coefficient

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")

    def state_dim(self, dim: int) -> int:
        return 0 if self.kind == SGD else dim


def zero_state(cfg: OptimizerConfig, dim: int) -> np.ndarray:
    return np.zeros(cfg.state_dim(dim), dtype=ENTRY_DTYPE)


@dataclass(frozen=True)
class UpdateDiff:
    """Exact (new - old) deltas of one applied update, in float64."""

    entry_id: int
    seq: int                      # sequence number within the origin server
    sample_id: int
    entry_delta: np.ndarray
    state_delta: np.ndarray


def apply_update(
    entry: np.ndarray,
    state: np.ndarray,
    grad: np.ndarray,
    cfg: OptimizerConfig,
    *,
    entry_id: int = 0,
    seq: int = 0,
    sample_id: int = 0,
) -> tuple[np.ndarray, np.ndarray, UpdateDiff]:
    """One optimizer step; returns (new_entry, new_state, diff)."""
    if grad.shape != entry.shape:
        raise ValueError(f"gradient dimension {grad.shape} != entry dimension {entry.shape}")
    if not np.all(np.isfinite(grad)):
        raise ValueError("gradient contains non-finite elements")
    if state.shape[0] != cfg.state_dim(entry.shape[0]):
        raise ValueError("optimizer state has wrong dimension")

    e = entry.astype(np.float64)
    g = grad.astype(np.float64)
    if cfg.kind == ADAGRAD:
        # accumulator includes the current gradient before the step is sized
        acc = state.astype(np.float64) + g * g
        new_entry = e - cfg.learning_rate * g / np.sqrt(acc + cfg.epsilon)
        new_state = acc
    elif cfg.kind == MOMENTUM_SGD:
        vel = cfg.momentum * state.astype(np.float64) + g
        new_entry = e - cfg.learning_rate * vel
        new_state = vel
    else:
        new_entry = e - cfg.learning_rate * g
        new_state = state.astype(np.float64)

    new_entry32 = new_entry.astype(ENTRY_DTYPE)
    new_state32 = new_state.astype(ENTRY_DTYPE)
    diff = UpdateDiff(
        entry_id=entry_id,
        seq=seq,
        sample_id=sample_id,
        entry_delta=new_entry32.astype(np.float64) - entry.astype(np.float64),
        state_delta=new_state32.astype(np.float64) - state.astype(np.float64),
    )
    return new_entry32, new_state32, diff


def apply_diff(
    target: np.ndarray, target_state: np.ndarray, diff: UpdateDiff
) -> tuple[np.ndarray, np.ndarray]:
    """Fold a propagated difference into a parity entry and its state."""
    if diff.entry_delta.shape != target.shape:
        raise ValueError("diff entry dimension mismatch")
    if diff.state_delta.shape != target_state.shape:
        raise ValueError("diff state dimension mismatch")
    new_target = (target.astype(np.float64) + diff.entry_delta).astype(ENTRY_DTYPE)
    new_state = (target_state.astype(np.float64) + diff.state_delta).astype(ENTRY_DTYPE)
    return new_target, new_state


def replay_diffs(
    initial: np.ndarray, deltas: list[np.ndarray]
) -> np.ndarray:
    """Fold float64 deltas onto an initial float32 value, one at a time.

    Mirrors the storage arithmetic (float64 add, round to float32 after each
    fold), so the result matches the stored value bit for bit.
    """
    value = initial.astype(ENTRY_DTYPE)
    for d in deltas:
        value = (value.astype(np.float64) + d).astype(ENTRY_DTYPE)
    return value


@dataclass
class ParitySchemeReport:
    """Deviations of both parity-maintenance schemes from the member sum."""

    steps: int
    gradient_propagation_deviation: float
    difference_propagation_deviation: float
    tolerance: float = 1e-3
    per_step_gradient_deviation: list[float] = field(default_factory=list)

    @property
    def gradient_propagation_correct(self) -> bool:
        return self.gradient_propagation_deviation <= self.tolerance

    @property
    def difference_propagation_correct(self) -> bool:
        return self.difference_propagation_deviation <= self.tolerance


def run_parity_scheme_comparison(
    cfg: OptimizerConfig,
    workload: list[tuple[int, np.ndarray]],
    k: int,
    dim: int,
    initial_members: list[np.ndarray] | None = None,
) -> ParitySchemeReport:
    """Drive one parity group under both schemes and measure the damage.

    ``workload`` is a list of (member index, gradient) steps.  The naive
    scheme applies the optimizer to the parity itself, using the member's
    gradient against the parity's accumulated state; the difference scheme
    folds the member's before/after deltas.
    """
    if k < 2:
        raise ValueError("k must be >= 2")
    if initial_members is None:
        members = [np.zeros(dim, dtype=ENTRY_DTYPE) for _ in range(k)]
    else:
        members = [m.astype(ENTRY_DTYPE).copy() for m in initial_members]
    states = [zero_state(cfg, dim) for _ in range(k)]

    parity_dp = encode(members)
    parity_dp_state = zero_state(cfg, dim)
    parity_gp = encode(members)
    parity_gp_state = encode(states) if cfg.state_dim(dim) else zero_state(cfg, dim)

    per_step = []
    for step, (idx, grad) in enumerate(workload):
        if not 0 <= idx < k:
            raise ValueError(f"member index {idx} out of range at step {step}")
        members[idx], states[idx], diff = apply_update(
            members[idx], states[idx], grad, cfg, entry_id=idx, seq=step
        )
        parity_dp, parity_dp_state = apply_diff(parity_dp, parity_dp_state, diff)
        # naive scheme: optimizer step on the parity with the parity's state
        parity_gp, parity_gp_state, _ = apply_update(parity_gp, parity_gp_state, grad, cfg)
        per_step.append(float(np.max(np.abs(parity_gp - encode(members)))))

    true_sum = encode(members)
    return ParitySchemeReport(
        steps=len(workload),
        gradient_propagation_deviation=float(np.max(np.abs(parity_gp - true_sum))) if workload else 0.0,
        difference_propagation_deviation=float(np.max(np.abs(parity_dp - true_sum))) if workload else 0.0,
        per_step_gradient_deviation=per_step,
    )


def adagrad_counterexample(
    learning_rate: float = 0.1, epsilon: float = 1e-8
) -> ParitySchemeReport:
    """Two-step workload where the naive scheme visibly corrupts the parity.

    Step one updates member 0 (parity state happens to match member 0's, so
    both schemes agree); step two updates member 1, whose own accumulator is
    half the parity's, so the naive step is undersized.
    """
    cfg = OptimizerConfig(kind=ADAGRAD, learning_rate=learning_rate, epsilon=epsilon)
    one = np.ones(1, dtype=ENTRY_DTYPE)
    return run_parity_scheme_comparison(cfg, [(0, one), (1, one)], k=2, dim=1)
