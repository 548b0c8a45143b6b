import math

import numpy as np
import pytest

from qsynth.statevector import AGENT_GATES, Circuit, Gate, StateVector


def random_gate(rng: np.random.Generator, n: int, kinds=AGENT_GATES) -> Gate:
    kinds = [k for k in kinds if k != "CNOT" or n > 1]
    kind = kinds[rng.integers(len(kinds))]
    if kind == "CNOT":
        control, target = rng.choice(n, size=2, replace=False)
        return Gate("CNOT", int(target), int(control))
    q = int(rng.integers(n))
    if kind in ("Rx", "Ry", "Rz"):
        return Gate(kind, q, angle=float(rng.uniform(-math.pi, math.pi)))
    return Gate(kind, q)


def random_circuit(rng: np.random.Generator, n: int, length: int, kinds=AGENT_GATES) -> Circuit:
    return Circuit(n, [random_gate(rng, n, kinds) for _ in range(length)])


def random_state(rng: np.random.Generator, n: int) -> StateVector:
    a = rng.normal(size=1 << n) + 1j * rng.normal(size=1 << n)
    return StateVector.normalized(a)


def fd_fidelity_gradient(c: Circuit, target: StateVector, h: float = 1e-5) -> np.ndarray:
    """Central differences on the dense-matrix simulator path."""
    from qsynth.statevector import fidelity, run_circuit_dense

    angles = c.angles()
    out = np.zeros_like(angles)
    for i in range(angles.size):
        up, down = angles.copy(), angles.copy()
        up[i] += h
        down[i] -= h
        f_up = fidelity(target, run_circuit_dense(c.with_angles(up)))
        f_down = fidelity(target, run_circuit_dense(c.with_angles(down)))
        out[i] = (f_up - f_down) / (2 * h)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS[number] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
