"""Sequential circuit-synthesis environment.

An episode starts from ``|0...0>`` and a target state. Each step the agent
appends one gate from {Rx, Ry, Rz, CNOT}; the reward is the change in
fidelity to the target, plus a bonus once ``1 - F <= epsilon``. Episodes end
on success or after ``L = 2 * lam`` gates.

Targets are produced by applying ``lam`` random gates to ``|0...0>``. A
candidate gate is redrawn when the resulting state has fidelity above
``1 - 0.1`` with any state already visited while building that same target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DomainError, EpisodeStateError, GenerationError
from .statevector import (
    AGENT_GATES,
    Circuit,
    Gate,
    StateVector,
    apply_gate,
    basis_state,
    fidelity,
    format_circuit,
    parse_circuit,
    run_circuit,
    zero_state,
)

CNOT_INDEX = AGENT_GATES.index("CNOT")
REPEAT_TOLERANCE = 0.1
MAX_REJECTIONS = 1000


@dataclass(frozen=True)
class EnvConfig:
    n: int
    lam: int
    epsilon: float = 0.01
    terminal_bonus: float = 1.0
    reward_clip: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.n <= 12:
            raise DomainError(f"n={self.n} outside 1..12")
        if self.lam < 1:
            raise DomainError(f"lambda={self.lam} must be >= 1")
        if not 0 < self.epsilon < 1:
            raise DomainError(f"epsilon={self.epsilon} must lie in (0, 1)")
        if self.reward_clip <= 0:
            raise DomainError("reward_clip must be positive")

    @property
    def budget(self) -> int:
        """Episode depth budget L = 2 * lambda (counted in gates)."""
        return 2 * self.lam

    @property
    def obs_dim(self) -> int:
        return 4 << self.n


@dataclass
class TargetSpec:
    state: StateVector
    reference: Circuit | None
    lam: int
    label: str = ""


@dataclass(frozen=True)
class AgentAction:
    gate: int
    q1: int
    q2: int = -1
    theta_unit: float = 0.5


@dataclass
class StepResult:
    obs: np.ndarray
    reward: float
    terminated: bool
    truncated: bool
    info: dict = field(default_factory=dict)


def unit_to_angle(theta_unit: float) -> float:
    return 2 * math.pi * theta_unit - math.pi


def is_repeat(candidate: StateVector, visited: Iterable[StateVector], tolerance: float = REPEAT_TOLERANCE) -> bool:
    return any(fidelity(candidate, v) > 1 - tolerance for v in visited)


def _random_gate(n: int, rng: np.random.Generator) -> Gate:
    kinds = AGENT_GATES if n > 1 else AGENT_GATES[:CNOT_INDEX]
    kind = kinds[rng.integers(len(kinds))]
    if kind == "CNOT":
        control, target = rng.choice(n, size=2, replace=False)
        return Gate("CNOT", int(target), int(control))
    return Gate(kind, int(rng.integers(n)), angle=float(rng.uniform(-math.pi, math.pi)))


def generate_target(cfg: EnvConfig, rng: np.random.Generator) -> TargetSpec:
    """Random target reachable with exactly ``cfg.lam`` gates."""
    zero = zero_state(cfg.n)
    while True:
        state = zero
        visited = [zero]
        gates: list[Gate] = []
        while len(gates) < cfg.lam:
            for _ in range(MAX_REJECTIONS):
                g = _random_gate(cfg.n, rng)
                candidate = apply_gate(state, g)
                if not is_repeat(candidate, visited):
                    break
            else:
                raise GenerationError(f"{MAX_REJECTIONS} consecutive gate rejections")
            gates.append(g)
            visited.append(candidate)
            state = candidate
        # the repeat rule already keeps targets away from |0...0>; kept as a guard
        if 1 - fidelity(zero, state) > cfg.epsilon:
            return TargetSpec(state, Circuit(cfg.n, gates), cfg.lam)


def encode_observation(current: StateVector, target: StateVector) -> np.ndarray:
    """``[Re(current) | Im(current) | Re(target) | Im(target)]``."""
    if current.n != target.n:
        raise DomainError("current and target sizes differ")
    return np.concatenate([current.amps.real, current.amps.imag, target.amps.real, target.amps.imag])


def decode_observation(obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of :func:`encode_observation`: (current, target) amplitudes."""
    d = obs.size // 4
    return obs[:d] + 1j * obs[d : 2 * d], obs[2 * d : 3 * d] + 1j * obs[3 * d :]


def decode_action(a: AgentAction, n: int) -> Gate:
    """Map an agent action to a gate. For CNOT, ``a.q1`` is the control and ``a.q2`` the target."""
    if not 0 <= a.gate < len(AGENT_GATES):
        raise DomainError(f"gate index {a.gate} out of range")
    if not 0 <= a.q1 < n:
        raise DomainError(f"qubit {a.q1} out of range for n={n}")
    kind = AGENT_GATES[a.gate]
    if kind == "CNOT":
        if not 0 <= a.q2 < n:
            raise DomainError(f"qubit {a.q2} out of range for n={n}")
        if a.q1 == a.q2:
            raise DomainError("CNOT control and target must differ")
        return Gate("CNOT", a.q2, a.q1)
    return Gate(kind, a.q1, angle=unit_to_angle(a.theta_unit))


def rcd(synth_gate_count: int, lam: int) -> float:
    """Reconstructed circuit depth as a percentage of the target's gate count."""
    if lam < 1:
        raise DomainError("lambda must be >= 1")
    return 100.0 * synth_gate_count / lam


class SynthesisEnv:
    """Single-episode-at-a-time environment with its own RNG.

    ``target`` pins every episode to one state instead of sampling targets.
    ``refiner`` switches on two-stage mode: rotations are placed with angle 0
    and the refiner (see :class:`qsynth.refine.TwoStageHook`) optimizes the
    angles at its trigger points.
    """

    def __init__(self, cfg: EnvConfig, target: TargetSpec | StateVector | None = None, refiner=None, rng=None):
        self.cfg = cfg
        if isinstance(target, StateVector):
            target = TargetSpec(target, None, cfg.lam)
        if target is not None and target.state.n != cfg.n:
            raise DomainError("fixed target has the wrong qubit count")
        self.fixed_target = target
        self.refiner = refiner
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed)
        self.target: TargetSpec | None = None
        self.circuit = Circuit(cfg.n)
        self.state = zero_state(cfg.n)
        self.fidelity = 0.0
        self.initial_fidelity = 0.0
        self.done = True

    @property
    def two_stage(self) -> bool:
        return self.refiner is not None

    def reset(self) -> tuple[np.ndarray, TargetSpec]:
        self.target = self.fixed_target or generate_target(self.cfg, self.rng)
        self.circuit = Circuit(self.cfg.n)
        self.state = zero_state(self.cfg.n)
        self.fidelity = self.initial_fidelity = fidelity(self.target.state, self.state)
        self.done = False
        return self.observation(), self.target

    def observation(self) -> np.ndarray:
        return encode_observation(self.state, self.target.state)

    def step(self, a: AgentAction) -> StepResult:
        if self.done:
            raise EpisodeStateError("step() called on a finished episode; call reset()")
        g = decode_action(a, self.cfg.n)
        if self.two_stage and g.is_rotation:
            g = g.with_angle(0.0)
        self.circuit.append(g)
        self.state = apply_gate(self.state, g)
        f = fidelity(self.target.state, self.state)
        refined = False
        if self.refiner is not None:
            res = self.refiner(self.circuit, self.target.state, self.cfg.budget, f)
            if res is not None:
                refined = True
                self.circuit = res.circuit
                self.state = run_circuit(self.circuit)
                f = fidelity(self.target.state, self.state)

        clip = self.cfg.reward_clip
        reward = min(max(f - self.fidelity, -clip), clip)
        sfe = 1.0 - f
        terminated = sfe <= self.cfg.epsilon
        if terminated:
            reward += self.cfg.terminal_bonus
        depth = len(self.circuit)
        truncated = not terminated and depth >= self.cfg.budget
        self.fidelity = f
        self.done = terminated or truncated
        info = {"fidelity": f, "depth": depth, "sfe": sfe, "refined": refined}
        return StepResult(self.observation(), float(reward), terminated, truncated, info)


def basis_targets(n: int = 2) -> dict[str, StateVector]:
    """Computational basis states keyed by bitstring, most significant qubit first."""
    return {format(i, f"0{n}b"): basis_state(n, i) for i in range(1 << n)}


def bell_targets() -> dict[str, StateVector]:
    s = 1 / math.sqrt(2)
    return {
        "phi+": StateVector([s, 0, 0, s]),
        "phi-": StateVector([s, 0, 0, -s]),
        "psi+": StateVector([0, s, s, 0]),
        "psi-": StateVector([0, s, -s, 0]),
    }


def generate_corpus(cfg: EnvConfig, count: int, base_seed: int) -> list[tuple[int, TargetSpec]]:
    """``count`` targets, the i-th drawn from a generator seeded with ``base_seed + i``."""
    return [(base_seed + i, generate_target(cfg, np.random.default_rng(base_seed + i))) for i in range(count)]


def format_corpus(entries: Iterable[tuple[int, TargetSpec]]) -> str:
    """Blocks of ``n lambda seed`` followed by the generating circuit."""
    blocks = []
    for seed, spec in entries:
        if spec.reference is None:
            raise DomainError("only generated targets can be exported")
        blocks.append(f"{spec.state.n} {spec.lam} {seed}\n" + format_circuit(spec.reference))
    return "\n".join(blocks)


def parse_corpus(text: str) -> list[tuple[int, TargetSpec]]:
    entries = []
    header = None
    body: list[str] = []

    def flush():
        if header is not None:
            n, lam, seed = header
            circuit = parse_circuit("\n".join(body), n)
            entries.append((seed, TargetSpec(run_circuit(circuit), circuit, lam)))

    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if tokens[0].lstrip("-").isdigit():
            if len(tokens) != 3:
                raise DomainError(f"line {lineno}: header must be 'n lambda seed'")
            flush()
            header = tuple(int(t) for t in tokens)
            body = []
        else:
            if header is None:
                raise DomainError(f"line {lineno}: gate before any header")
            body.append(line)
    flush()
    return entries


def load_corpus(path: str | Path) -> list[tuple[int, TargetSpec]]:
    return parse_corpus(Path(path).read_text())
