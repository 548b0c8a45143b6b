"""Dense statevector simulation for the rotation + CNOT gate universe.

Qubit ordering is little-endian: qubit ``q`` is bit ``q`` of the basis index,
so ``amps[0b10]`` is the amplitude of qubit 1 set and qubit 0 clear.

Rotations use half-angle conventions::

    Rx(t) = exp(-i t X / 2)    Ry(t) = exp(-i t Y / 2)    Rz(t) = diag(e^{-it/2}, e^{it/2})

which makes the two-term parameter-shift rule with shifts of +-pi/2 exact.
A CNOT stores its target in ``q1`` and its control in ``q2``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError

MAX_QUBITS = 12
ROTATIONS = ("Rx", "Ry", "Rz")
AGENT_GATES = ("Rx", "Ry", "Rz", "CNOT")
CLIFFORD_T = ("CNOT", "H", "S", "T", "I")
GATE_KINDS = ("Rx", "Ry", "Rz", "CNOT", "H", "S", "T", "I")

_SQRT1_2 = 1.0 / math.sqrt(2.0)
_FIXED = {
    "H": np.array([[_SQRT1_2, _SQRT1_2], [_SQRT1_2, -_SQRT1_2]], dtype=complex),
    "S": np.array([[1, 0], [0, 1j]], dtype=complex),
    "T": np.array([[1, 0], [0, np.exp(1j * math.pi / 4)]], dtype=complex),
    "I": np.eye(2, dtype=complex),
}
# basis order |control target>: |00>, |01>, |10>, |11> with control as the high bit
_CNOT = np.array(
    [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=complex
)


@dataclass(frozen=True)
class Gate:
    """One gate application. ``q2`` is the CNOT control; ``angle`` is in radians."""

    kind: str
    q1: int
    q2: int | None = None
    angle: float | None = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise DomainError(f"unknown gate kind {self.kind!r}")
        if self.kind in ROTATIONS:
            if self.angle is None:
                raise DomainError(f"{self.kind} requires an angle")
            if not math.isfinite(self.angle):
                raise DomainError(f"non-finite angle {self.angle!r}")
        elif self.angle is not None:
            raise DomainError(f"{self.kind} takes no angle")
        if self.kind == "CNOT":
            if self.q2 is None:
                raise DomainError("CNOT requires a control qubit (q2)")
            if self.q2 == self.q1:
                raise DomainError("CNOT control and target must differ")
        elif self.q2 is not None:
            raise DomainError(f"{self.kind} acts on a single qubit")
        if self.q1 < 0 or (self.q2 is not None and self.q2 < 0):
            raise DomainError("qubit indices must be non-negative")

    @property
    def is_rotation(self) -> bool:
        return self.kind in ROTATIONS

    @property
    def qubits(self) -> tuple[int, ...]:
        return (self.q1,) if self.q2 is None else (self.q1, self.q2)

    def with_angle(self, angle: float) -> "Gate":
        return replace(self, angle=float(angle))

    def __str__(self):
        if self.kind == "CNOT":
            return f"CNOT({self.q2}->{self.q1})"
        if self.is_rotation:
            return f"{self.kind}({self.angle:.4f})@q{self.q1}"
        return f"{self.kind}@q{self.q1}"


def rx(q: int, angle: float) -> Gate:
    return Gate("Rx", q, angle=float(angle))


def ry(q: int, angle: float) -> Gate:
    return Gate("Ry", q, angle=float(angle))


def rz(q: int, angle: float) -> Gate:
    return Gate("Rz", q, angle=float(angle))


def cnot(control: int, target: int) -> Gate:
    return Gate("CNOT", target, control)


@dataclass
class Circuit:
    n: int
    gates: list[Gate] = field(default_factory=list)

    def __post_init__(self):
        _check_qubit_count(self.n)
        self.gates = list(self.gates)
        for g in self.gates:
            _check_gate_fits(g, self.n)

    def __len__(self):
        return len(self.gates)

    def __iter__(self):
        return iter(self.gates)

    @property
    def gate_count(self) -> int:
        return len(self.gates)

    def append(self, g: Gate) -> None:
        _check_gate_fits(g, self.n)
        self.gates.append(g)

    def copy(self) -> "Circuit":
        return Circuit(self.n, list(self.gates))

    def rotation_indices(self) -> list[int]:
        return [i for i, g in enumerate(self.gates) if g.is_rotation]

    def angles(self) -> np.ndarray:
        return np.array([g.angle for g in self.gates if g.is_rotation], dtype=float)

    def with_angles(self, angles: Sequence[float]) -> "Circuit":
        """Return a copy with rotation angles replaced in gate order."""
        idx = self.rotation_indices()
        if len(angles) != len(idx):
            raise DomainError(f"expected {len(idx)} angles, got {len(angles)}")
        gates = list(self.gates)
        for i, a in zip(idx, angles):
            gates[i] = gates[i].with_angle(a)
        return Circuit(self.n, gates)


class StateVector:
    """Unit-norm vector of ``2**n`` complex amplitudes."""

    __slots__ = ("amps", "n")

    def __init__(self, amps: Iterable[complex], *, check: bool = True):
        a = np.asarray(amps, dtype=np.complex128)
        if a.ndim != 1:
            raise DomainError("amplitudes must be a 1-D array")
        n = a.size.bit_length() - 1
        if a.size < 2 or a.size != 1 << n:
            raise DomainError(f"length {a.size} is not a power of two >= 2")
        _check_qubit_count(n)
        if check:
            norm2 = float(np.vdot(a, a).real)
            if abs(norm2 - 1.0) > 1e-10:
                raise DomainError(f"state is not normalized (|psi|^2 = {norm2!r})")
        self.amps = a
        self.n = n

    @classmethod
    def normalized(cls, amps: Iterable[complex]) -> "StateVector":
        a = np.asarray(amps, dtype=np.complex128)
        norm = np.linalg.norm(a)
        if norm == 0:
            raise DomainError("cannot normalize the zero vector")
        return cls(a / norm)

    def __len__(self):
        return self.amps.size

    def __repr__(self):
        return f"StateVector(n={self.n}, amps={np.array2string(self.amps, precision=4)})"

    def copy(self) -> "StateVector":
        return StateVector(self.amps.copy(), check=False)

    def norm2(self) -> float:
        return float(np.vdot(self.amps, self.amps).real)


def _check_qubit_count(n: int) -> None:
    if not 1 <= n <= MAX_QUBITS:
        raise DomainError(f"qubit count {n} outside 1..{MAX_QUBITS}")


def _check_gate_fits(g: Gate, n: int) -> None:
    for q in g.qubits:
        if q >= n:
            raise DomainError(f"{g} addresses qubit {q} but the register has {n}")


def zero_state(n: int) -> StateVector:
    _check_qubit_count(n)
    a = np.zeros(1 << n, dtype=np.complex128)
    a[0] = 1.0
    return StateVector(a, check=False)


def basis_state(n: int, index: int) -> StateVector:
    _check_qubit_count(n)
    if not 0 <= index < 1 << n:
        raise DomainError(f"basis index {index} out of range for n={n}")
    a = np.zeros(1 << n, dtype=np.complex128)
    a[index] = 1.0
    return StateVector(a, check=False)


def gate_matrix(kind: str, angle: float | None = None) -> np.ndarray:
    """2x2 matrix for single-qubit kinds, 4x4 for CNOT (control is the high bit)."""
    if kind in ROTATIONS:
        if angle is None:
            raise DomainError(f"{kind} requires an angle")
        c, s = math.cos(angle / 2), math.sin(angle / 2)
        if kind == "Rx":
            return np.array([[c, -1j * s], [-1j * s, c]], dtype=complex)
        if kind == "Ry":
            return np.array([[c, -s], [s, c]], dtype=complex)
        return np.array([[complex(c, -s), 0], [0, complex(c, s)]], dtype=complex)
    if kind == "CNOT":
        return _CNOT.copy()
    if kind in _FIXED:
        return _FIXED[kind].copy()
    raise DomainError(f"unknown gate kind {kind!r}")


def _apply_inplace(amps: np.ndarray, g: Gate, n: int) -> None:
    if g.kind == "CNOT":
        # view indexed [high bits, control bit, mid bits, target bit, low bits]
        # with the two axes placed by bit position
        c, t = g.q2, g.q1
        hi, lo = max(c, t), min(c, t)
        v = amps.reshape(1 << (n - hi - 1), 2, 1 << (hi - lo - 1), 2, 1 << lo)
        if c > t:
            sub = v[:, 1, :, :, :]
            sub[:, :, [0, 1], :] = sub[:, :, [1, 0], :]
        else:
            sub = v[:, :, :, 1, :]
            sub[:, [0, 1], :] = sub[:, [1, 0], :]
        return
    m = gate_matrix(g.kind, g.angle)
    v = amps.reshape(-1, 2, 1 << g.q1)
    a0 = v[:, 0, :].copy()
    a1 = v[:, 1, :]
    if m[0, 1] == 0 and m[1, 0] == 0:
        v[:, 0, :] *= m[0, 0]
        v[:, 1, :] *= m[1, 1]
        return
    v[:, 0, :] = m[0, 0] * a0 + m[0, 1] * a1
    v[:, 1, :] = m[1, 0] * a0 + m[1, 1] * a1


def apply_gate(state: StateVector, g: Gate) -> StateVector:
    """Return ``U_g |state>`` as a new state; the input is left untouched."""
    _check_gate_fits(g, state.n)
    out = state.amps.copy()
    _apply_inplace(out, g, state.n)
    return StateVector(out, check=False)


def run_circuit(c: Circuit, initial: StateVector | None = None) -> StateVector:
    if initial is None:
        amps = zero_state(c.n).amps
    else:
        if initial.n != c.n:
            raise DomainError("initial state and circuit sizes differ")
        amps = initial.amps.copy()
    for g in c.gates:
        _apply_inplace(amps, g, c.n)
    return StateVector(amps, check=False)


def full_matrix(g: Gate, n: int) -> np.ndarray:
    """Dense ``2**n x 2**n`` unitary of ``g``; the reference path for small n."""
    _check_gate_fits(g, n)
    eye = np.eye(2, dtype=complex)

    def embed(ops: dict[int, np.ndarray]) -> np.ndarray:
        # kron order runs from the most significant qubit down to qubit 0
        out = np.ones((1, 1), dtype=complex)
        for q in reversed(range(n)):
            out = np.kron(out, ops.get(q, eye))
        return out

    if g.kind == "CNOT":
        p0 = np.diag([1, 0]).astype(complex)
        p1 = np.diag([0, 1]).astype(complex)
        x = np.array([[0, 1], [1, 0]], dtype=complex)
        return embed({g.q2: p0}) + embed({g.q2: p1, g.q1: x})
    return embed({g.q1: gate_matrix(g.kind, g.angle)})


def run_circuit_dense(c: Circuit) -> StateVector:
    amps = zero_state(c.n).amps
    for g in c.gates:
        amps = full_matrix(g, c.n) @ amps
    return StateVector(amps, check=False)


def fidelity(a: StateVector, b: StateVector) -> float:
    """``|<a|b>|^2``, symmetric and blind to global phase."""
    if a.n != b.n:
        raise DomainError(f"dimension mismatch: {a.n} vs {b.n} qubits")
    return float(abs(np.vdot(a.amps, b.amps)) ** 2)


def _prefix_states(c: Circuit) -> list[np.ndarray]:
    states = [zero_state(c.n).amps]
    for g in c.gates:
        nxt = states[-1].copy()
        _apply_inplace(nxt, g, c.n)
        states.append(nxt)
    return states


def _shifted_fidelity(c: Circuit, target: StateVector, prefix: np.ndarray, i: int, shift: float) -> float:
    g = c.gates[i]
    amps = prefix.copy()
    _apply_inplace(amps, g.with_angle(g.angle + shift), c.n)
    for h in c.gates[i + 1:]:
        _apply_inplace(amps, h, c.n)
    return float(abs(np.vdot(target.amps, amps)) ** 2)


def shift_gradient(c: Circuit, target: StateVector, gate_index: int) -> float:
    """dF/dtheta of one rotation via ``[F(theta + pi/2) - F(theta - pi/2)] / 2``."""
    if target.n != c.n:
        raise DomainError("target and circuit sizes differ")
    if not 0 <= gate_index < len(c.gates) or not c.gates[gate_index].is_rotation:
        raise DomainError(f"gate {gate_index} is not a rotation")
    prefix = run_circuit(Circuit(c.n, c.gates[:gate_index])).amps
    plus = _shifted_fidelity(c, target, prefix, gate_index, math.pi / 2)
    minus = _shifted_fidelity(c, target, prefix, gate_index, -math.pi / 2)
    return (plus - minus) / 2


def fidelity_gradient(c: Circuit, target: StateVector) -> np.ndarray:
    """Parameter-shift gradient of the fidelity, one entry per rotation gate."""
    if target.n != c.n:
        raise DomainError("target and circuit sizes differ")
    prefix = _prefix_states(c)
    grads = []
    for i in c.rotation_indices():
        plus = _shifted_fidelity(c, target, prefix[i], i, math.pi / 2)
        minus = _shifted_fidelity(c, target, prefix[i], i, -math.pi / 2)
        grads.append((plus - minus) / 2)
    return np.array(grads, dtype=float)


def circuit_fidelity(c: Circuit, target: StateVector) -> float:
    return fidelity(target, run_circuit(c))


def format_circuit(c: Circuit) -> str:
    """One gate per line: ``KIND q1 [q2] [angle]`` with 17 significant digits."""
    lines = []
    for g in c.gates:
        parts = [g.kind, str(g.q1)]
        if g.q2 is not None:
            parts.append(str(g.q2))
        if g.angle is not None:
            parts.append(f"{g.angle:.17g}")
        lines.append(" ".join(parts))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_circuit(text: str, n: int) -> Circuit:
    gates = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        kind = parts[0]
        try:
            if kind == "CNOT":
                if len(parts) != 3:
                    raise DomainError("CNOT needs target and control")
                g = Gate(kind, int(parts[1]), int(parts[2]))
            elif kind in ROTATIONS:
                if len(parts) != 3:
                    raise DomainError(f"{kind} needs qubit and angle")
                g = Gate(kind, int(parts[1]), angle=float(parts[2]))
            else:
                if len(parts) != 2:
                    raise DomainError(f"{kind} needs exactly one qubit")
                g = Gate(kind, int(parts[1]))
        except (DomainError, ValueError) as exc:
            raise DomainError(f"line {lineno}: {exc}") from None
        gates.append(g)
    return Circuit(n, gates)
