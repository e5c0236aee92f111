"""Sampling-adaptive condition selection.

Each enhanced condition carries a gate weight ``omega``. After every
sampling step the weights move according to how fast each condition's
loss is changing relative to the others (a GradNorm-style rule on scalar
losses), and the ``k`` conditions with the largest weight are applied.

For a state at step ``s`` with current losses ``L`` and previous losses
``P``::

    ratio_i = L_i / max(P_i, eps_l)
    alpha_i = (ratio_i / mean(ratio)) ** theta
    g_i     = |omega_i * L_i|
    delta_i = |g_i - mean(g) * alpha_i|
    omega_i <- omega_i - lr * delta_i

followed by clamping at ``omega_min`` and rescaling to ``sum(omega) = N``.
The first two steps leave ``omega`` untouched and select uniformly at
random.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .errors import LengthMismatch, NonFiniteLoss, ParamError, TraceFormatError

__all__ = [
    "GateState",
    "init_gate",
    "gate_update",
    "select_topk",
    "project_omega",
    "StepRecord",
    "SelectionTrace",
    "record_step",
    "BOOTSTRAP_STEPS",
]

BOOTSTRAP_STEPS = 2


@dataclass(frozen=True)
class GateState:
    omega: np.ndarray
    k: int = 3
    theta: float = 1.0
    lr: float = 0.1
    omega_min: float = 1e-3
    eps_l: float = 1e-12
    rng_seed: int = 0
    step: int = 0
    prev_loss: Optional[np.ndarray] = None
    prev_prev_loss: Optional[np.ndarray] = None
    delta: Optional[np.ndarray] = None
    rank_by_delta: bool = False

    @property
    def n(self) -> int:
        return len(self.omega)


def init_gate(n: int, k: int = 3, theta: float = 1.0, lr: float = 0.1, rng_seed: int = 0, **kw) -> GateState:
    """Fresh state with every weight at 1."""
    if n < 0:
        raise ParamError("number of conditions must be non-negative")
    if k > n:
        raise ParamError(f"k={k} exceeds the number of enhanced conditions ({n})")
    if k < 0:
        raise ParamError("k must be non-negative")
    omega = np.ones(n)
    omega.setflags(write=False)
    return GateState(omega=omega, k=k, theta=theta, lr=lr, rng_seed=rng_seed, **kw)


def project_omega(omega, omega_min: float) -> np.ndarray:
    """Closest-in-spirit feasible weights: ``omega_i >= omega_min`` and ``sum = N``.

    Entries that would fall below the floor after rescaling are pinned to
    it and the remaining mass is shared proportionally by the rest.
    """
    w = np.asarray(omega, dtype=np.float64)
    n = len(w)
    if n == 0:
        return w.copy()
    if not 0 < omega_min < 1:
        raise ParamError("omega_min must lie in (0, 1)")
    w = np.maximum(w, omega_min)
    pinned = np.zeros(n, dtype=bool)
    # Terminates: each pass pins at least one entry, and with omega_min < 1
    # the last free entry always stays above the floor.
    while True:
        free = ~pinned
        scale = (n - omega_min * pinned.sum()) / w[free].sum()
        below = free & (w * scale < omega_min)
        if not below.any():
            return np.where(pinned, omega_min, w * scale)
        pinned |= below


def gate_update(state: GateState, losses: Sequence[float]) -> GateState:
    """Advance the gate by one sampling step."""
    L = np.asarray(losses, dtype=np.float64)
    if L.shape != (state.n,):
        raise LengthMismatch(f"expected {state.n} losses, got shape {L.shape}")
    if not np.all(np.isfinite(L)) or np.any(L < 0):
        raise NonFiniteLoss(f"losses must be finite and non-negative, got {L}")

    omega = state.omega
    delta = None
    if state.step >= BOOTSTRAP_STEPS and state.prev_loss is not None and state.n > 0:
        ratio = L / np.maximum(state.prev_loss, state.eps_l)
        mean_ratio = ratio.mean()
        alpha = (ratio / mean_ratio) ** state.theta if mean_ratio > state.eps_l else np.ones_like(ratio)
        g = np.abs(omega * L)
        delta = np.abs(g - g.mean() * alpha)
        omega = project_omega(omega - state.lr * delta, state.omega_min)
        omega.setflags(write=False)

    L = L.copy()
    L.setflags(write=False)
    return replace(
        state,
        omega=omega,
        step=state.step + 1,
        prev_prev_loss=state.prev_loss,
        prev_loss=L,
        delta=delta,
    )


def select_topk(state: GateState, step: Optional[int] = None) -> List[int]:
    """Indices of the ``k`` conditions to apply at ``step`` (default ``state.step``).

    Bootstrap steps draw uniformly without replacement from a generator
    seeded by ``(rng_seed, step)``; later steps take the largest weights,
    ties going to the lower index.
    """
    s = state.step if step is None else step
    if state.k > state.n:
        raise ParamError(f"k={state.k} exceeds the number of conditions ({state.n})")
    if s < BOOTSTRAP_STEPS:
        rng = np.random.default_rng([state.rng_seed, s])
        return sorted(int(j) for j in rng.choice(state.n, size=state.k, replace=False))
    score = state.delta if (state.rank_by_delta and state.delta is not None) else state.omega
    order = np.lexsort((np.arange(state.n), -np.asarray(score)))
    return sorted(int(j) for j in order[: state.k])


# --------------------------------------------------------------------------
# trace
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    step: int
    losses: Tuple[float, ...]
    omega: Tuple[float, ...]
    selected: Tuple[int, ...]


@dataclass
class SelectionTrace:
    """Per-step record of losses, gate weights and selections."""

    condition_ids: List[str]
    records: List[StepRecord] = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def selection_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.condition_ids), dtype=np.int64)
        for rec in self.records:
            counts[list(rec.selected)] += 1
        return counts

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "condition_id", "loss", "omega", "selected"])
        for rec in self.records:
            chosen = set(rec.selected)
            for j, cid in enumerate(self.condition_ids):
                writer.writerow([rec.step, cid, repr(rec.losses[j]), repr(rec.omega[j]), int(j in chosen)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "SelectionTrace":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or [c.strip() for c in rows[0]] != ["step", "condition_id", "loss", "omega", "selected"]:
            raise TraceFormatError("trace CSV must start with header step,condition_id,loss,omega,selected")
        steps = {}
        ids: List[str] = []
        try:
            for lineno, row in enumerate(rows[1:], start=2):
                if not row:
                    continue
                if len(row) != 5:
                    raise TraceFormatError(f"line {lineno}: expected 5 fields, got {len(row)}")
                s, cid, loss, om, sel = int(row[0]), row[1], float(row[2]), float(row[3]), int(row[4])
                if sel not in (0, 1):
                    raise TraceFormatError(f"line {lineno}: selected must be 0 or 1")
                if cid not in ids:
                    ids.append(cid)
                steps.setdefault(s, []).append((cid, loss, om, sel))
        except ValueError as exc:
            raise TraceFormatError(f"unparseable trace row: {exc}") from None
        records = []
        for s in sorted(steps):
            rows_s = steps[s]
            if [r[0] for r in rows_s] != ids:
                raise TraceFormatError(f"step {s}: condition rows do not match {ids}")
            records.append(
                StepRecord(
                    s,
                    tuple(r[1] for r in rows_s),
                    tuple(r[2] for r in rows_s),
                    tuple(j for j, r in enumerate(rows_s) if r[3]),
                )
            )
        return cls(ids, records)


def record_step(trace: SelectionTrace, step: int, losses, omega, selected) -> SelectionTrace:
    trace.records.append(
        StepRecord(
            int(step),
            tuple(float(x) for x in losses),
            tuple(float(x) for x in omega),
            tuple(sorted(int(j) for j in selected)),
        )
    )
    return trace
