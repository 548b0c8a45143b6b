"""Continuous refinement of rotation angles on a fixed circuit structure.

Holds the Adam optimizer (also used for policy training), the
parameter-shift angle optimizer that drives the two-stage strategy, and the
hardware-efficient-ansatz baseline.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DomainError
from .statevector import Circuit, StateVector, circuit_fidelity, cnot, fidelity_gradient, ry, rz


@dataclass
class AdamState:
    """Moment estimates for Adam with bias correction."""

    lr: float
    size: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.m = np.zeros(self.size)
        self.v = np.zeros(self.size)

    def step(self, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
        """Descend one step on ``params`` in place and return it."""
        grads = np.asarray(grads, dtype=float)
        if params.shape != (self.size,) or grads.shape != (self.size,):
            raise DomainError(f"expected vectors of length {self.size}")
        if not np.all(np.isfinite(grads)):
            raise FloatingPointError("non-finite gradient passed to Adam")
        self.t += 1
        self.m *= self.beta1
        self.m += (1 - self.beta1) * grads
        self.v *= self.beta2
        self.v += (1 - self.beta2) * grads * grads
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return params


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Functional form: returns updated parameters, leaving ``params`` untouched."""
    return state.step(np.array(params, dtype=float), grads)


def wrap_angle(theta):
    """Map angles into [-pi, pi)."""
    return np.mod(np.asarray(theta) + math.pi, 2 * math.pi) - math.pi


class RefineResult(NamedTuple):
    circuit: Circuit
    trace: list[float]

    @property
    def fidelity(self) -> float:
        return max(self.trace)

    @property
    def steps(self) -> int:
        return len(self.trace) - 1


def refine_angles(
    c: Circuit,
    target: StateVector,
    max_steps: int = 300,
    lr: float = 0.1,
    tol: float = 1e-7,
    epsilon: float = 0.0,
    patience: int = 10,
) -> RefineResult:
    """Maximize fidelity over the rotation angles of ``c`` with Adam.

    Stops after ``max_steps``, after ``patience`` consecutive steps whose cost
    change is below ``tol``, or once ``1 - F <= epsilon``. The returned circuit
    is the best iterate seen; ``trace`` holds the fidelity of every iterate,
    starting with the initial one.
    """
    f0 = circuit_fidelity(c, target)
    trace = [f0]
    if not c.rotation_indices() or 1 - f0 <= epsilon:
        return RefineResult(c.copy(), trace)

    theta = c.angles()
    adam = AdamState(lr=lr, size=theta.size)
    best, best_f = c.copy(), f0
    current = c
    quiet = 0
    for _ in range(max_steps):
        grad = fidelity_gradient(current, target)
        adam.step(theta, -grad)
        theta = wrap_angle(theta)
        current = c.with_angles(theta)
        f = circuit_fidelity(current, target)
        quiet = quiet + 1 if abs(f - trace[-1]) < tol else 0
        trace.append(f)
        if f > best_f:
            best, best_f = current, f
        if 1 - f <= epsilon or quiet >= patience:
            break
    return RefineResult(best, trace)


def should_refine(depth: int, budget: int, fidelity: float, epsilon: float) -> bool:
    """Second-stage trigger: SFE unmet at half the depth budget or at its end."""
    return 1 - fidelity > epsilon and (depth == budget // 2 or depth == budget)


@dataclass
class TwoStageHook:
    """Runs angle refinement at the two-stage trigger points of an episode."""

    epsilon: float = 0.01
    lr: float = 0.1
    max_steps: int = 300
    tol: float = 1e-7
    calls: int = 0

    def __call__(self, circuit: Circuit, target: StateVector, budget: int, fidelity: float) -> RefineResult | None:
        if not should_refine(len(circuit), budget, fidelity, self.epsilon):
            return None
        self.calls += 1
        return refine_angles(
            circuit, target, max_steps=self.max_steps, lr=self.lr, tol=self.tol, epsilon=self.epsilon
        )


@dataclass(frozen=True)
class AnsatzSpec:
    """Layers of Ry then Rz on every qubit followed by a CNOT chain i -> i+1."""

    n: int
    layers: int = 2

    @property
    def num_params(self) -> int:
        return 2 * self.layers * self.n

    def build(self, angles: Sequence[float]) -> Circuit:
        if len(angles) != self.num_params:
            raise DomainError(f"ansatz takes {self.num_params} angles, got {len(angles)}")
        gates = []
        k = 0
        for _ in range(self.layers):
            for q in range(self.n):
                gates.append(ry(q, angles[k]))
                gates.append(rz(q, angles[k + 1]))
                k += 2
            gates.extend(cnot(q, q + 1) for q in range(self.n - 1))
        return Circuit(self.n, gates)


@dataclass
class BaselineRow:
    target_id: int
    seed: int
    initial_fidelity: float
    final_fidelity: float
    steps_used: int


@dataclass
class BaselineReport:
    rows: list[BaselineRow]

    @property
    def mean(self) -> float:
        return float(np.mean([r.final_fidelity for r in self.rows]))

    @property
    def min(self) -> float:
        return float(np.min([r.final_fidelity for r in self.rows]))

    CSV_HEADER = ("target_id", "seed", "initial_fidelity", "final_fidelity", "steps_used")

    def to_rows(self) -> list[tuple]:
        return [
            (r.target_id, r.seed, f"{r.initial_fidelity:.17g}", f"{r.final_fidelity:.17g}", r.steps_used)
            for r in self.rows
        ]


def classical_baseline(
    targets: Sequence[StateVector],
    steps: int = 300,
    lr: float = 0.1,
    seed: int = 0,
    layers: int = 2,
    init: str = "uniform",
) -> BaselineReport:
    """Optimize a hardware-efficient ansatz against each target independently.

    Angles start uniform in [-pi, pi] from ``seed + target index`` (or at zero
    with ``init="zeros"``). Only the optimizer's step budget stops a run.
    """
    if not targets:
        raise DomainError("no targets given")
    n = targets[0].n
    if any(t.n != n for t in targets):
        raise DomainError("all baseline targets must have the same qubit count")
    spec = AnsatzSpec(n, layers)
    rows = []
    for i, target in enumerate(targets):
        rng = np.random.default_rng(seed + i)
        if init == "zeros":
            angles = np.zeros(spec.num_params)
        elif init == "uniform":
            angles = rng.uniform(-math.pi, math.pi, size=spec.num_params)
        else:
            raise DomainError(f"unknown init {init!r}")
        res = refine_angles(spec.build(angles), target, max_steps=steps, lr=lr, tol=0.0)
        rows.append(BaselineRow(i, seed + i, res.trace[0], res.fidelity, res.steps))
    return BaselineReport(rows)
