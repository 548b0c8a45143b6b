"""Actor-critic MLP for the mixed gate / qubit / angle action, in plain numpy.

Shared trunk: two fully connected tanh layers. Heads: gate logits (4),
first-qubit logits (n), second-qubit logits (n), angle mean, and a value
estimate. The angle log-std is a single learnable scalar.

The angle is sampled as ``z ~ N(mu, sigma^2)`` and squashed with a sigmoid to
``theta_unit`` in (0, 1); the log-density includes the change-of-variables
term ``-log(theta_unit * (1 - theta_unit))``. For CNOT the second-qubit head
is masked at the first qubit (the control), so the target always differs.

All batched functions take observations of shape ``(B, 4 * 2**n)``.
Gradients are computed by hand in :func:`backward`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .env import CNOT_INDEX, AgentAction
from .errors import DomainError

NUM_GATES = 4
LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
THETA_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)
CHECKPOINT_MAGIC = "qsynth-policy"
CHECKPOINT_VERSION = 1


class PolicyParams:
    """All weights in one flat float64 vector, with named views into it."""

    def __init__(self, n: int, hidden: int = 64, flat: np.ndarray | None = None):
        self.n = n
        self.hidden = hidden
        self.obs_dim = 4 << n
        h = hidden
        self.shapes = {
            "W1": (self.obs_dim, h), "b1": (h,),
            "W2": (h, h), "b2": (h,),
            "Wg": (h, NUM_GATES), "bg": (NUM_GATES,),
            "Wq1": (h, n), "bq1": (n,),
            "Wq2": (h, n), "bq2": (n,),
            "Wmu": (h, 1), "bmu": (1,),
            "log_std": (1,),
            "Wv": (h, 1), "bv": (1,),
        }  # fmt: skip
        size = sum(math.prod(s) for s in self.shapes.values())
        if flat is None:
            flat = np.zeros(size)
        elif flat.shape != (size,):
            raise DomainError(f"flat parameter vector must have length {size}")
        self.flat = flat
        self._views = self.unflatten(flat)

    def unflatten(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        views, k = {}, 0
        for name, shape in self.shapes.items():
            size = math.prod(shape)
            views[name] = vec[k : k + size].reshape(shape)
            k += size
        return views

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    @property
    def size(self) -> int:
        return self.flat.size

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.n, self.hidden, self.flat.copy())

    @classmethod
    def initialize(cls, n: int, rng: np.random.Generator, hidden: int = 64, log_std: float = 0.0) -> "PolicyParams":
        """Orthogonal trunk (gain sqrt 2), near-uniform policy heads (gain 0.01)."""
        p = cls(n, hidden)
        p["W1"][:] = _orthogonal(rng, p.shapes["W1"], math.sqrt(2))
        p["W2"][:] = _orthogonal(rng, p.shapes["W2"], math.sqrt(2))
        for name in ("Wg", "Wq1", "Wq2", "Wmu"):
            p[name][:] = _orthogonal(rng, p.shapes[name], 0.01)
        p["Wv"][:] = _orthogonal(rng, p.shapes["Wv"], 1.0)
        p["log_std"][:] = log_std
        return p


def _orthogonal(rng: np.random.Generator, shape: tuple[int, int], gain: float) -> np.ndarray:
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


@dataclass
class ActionBatch:
    gate: np.ndarray
    q1: np.ndarray
    q2: np.ndarray
    theta: np.ndarray

    def __len__(self):
        return self.gate.size

    def __getitem__(self, idx) -> "ActionBatch":
        return ActionBatch(self.gate[idx], self.q1[idx], self.q2[idx], self.theta[idx])

    def action(self, i: int) -> AgentAction:
        return AgentAction(int(self.gate[i]), int(self.q1[i]), int(self.q2[i]), float(self.theta[i]))

    @classmethod
    def stack(cls, actions: list[AgentAction]) -> "ActionBatch":
        return cls(
            np.array([a.gate for a in actions], dtype=np.int64),
            np.array([a.q1 for a in actions], dtype=np.int64),
            np.array([a.q2 for a in actions], dtype=np.int64),
            np.array([a.theta_unit for a in actions], dtype=float),
        )


@dataclass
class ForwardOut:
    obs: np.ndarray
    h1: np.ndarray
    h2: np.ndarray
    gate_logits: np.ndarray
    q1_logits: np.ndarray
    q2_logits: np.ndarray
    mu: np.ndarray
    log_std: float
    log_std_active: bool
    value: np.ndarray


def forward(params: PolicyParams, obs: np.ndarray) -> ForwardOut:
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[1] != params.obs_dim:
        raise DomainError(f"observation length {obs.shape[1]} != {params.obs_dim}")
    h1 = np.tanh(obs @ params["W1"] + params["b1"])
    h2 = np.tanh(h1 @ params["W2"] + params["b2"])
    raw = float(params["log_std"][0])
    log_std = min(max(raw, LOG_STD_MIN), LOG_STD_MAX)
    return ForwardOut(
        obs=obs,
        h1=h1,
        h2=h2,
        gate_logits=h2 @ params["Wg"] + params["bg"],
        q1_logits=h2 @ params["Wq1"] + params["bq1"],
        q2_logits=h2 @ params["Wq2"] + params["bq2"],
        mu=(h2 @ params["Wmu"])[:, 0] + params["bmu"][0],
        log_std=log_std,
        log_std_active=LOG_STD_MIN <= raw <= LOG_STD_MAX,
        value=(h2 @ params["Wv"])[:, 0] + params["bv"][0],
    )


def _log_softmax(logits: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    z = logits if mask is None else np.where(mask, logits, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _entropy_terms(logp: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entropy per row and its gradient with respect to the logits."""
    p = np.exp(logp)
    safe = np.where(p > 0, logp, 0.0)
    h = -(p * safe).sum(axis=-1)
    dh = -p * (safe + h[:, None])
    return h, dh


def _gate_mask(n: int, batch: int) -> np.ndarray | None:
    if n > 1:
        return None
    mask = np.ones((batch, NUM_GATES), dtype=bool)
    mask[:, CNOT_INDEX] = False
    return mask


def _q2_mask(n: int, q1: np.ndarray) -> np.ndarray:
    return np.arange(n)[None, :] != q1[:, None]


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class Evaluation:
    """Log-probabilities, entropies and values for a batch of actions, plus what backward needs."""

    fw: ForwardOut
    actions: ActionBatch
    log_prob: np.ndarray
    entropy: np.ndarray
    value: np.ndarray
    logp_gate: np.ndarray
    logp_q1: np.ndarray
    logp_q2: np.ndarray | None
    is_cnot: np.ndarray
    use_angle: np.ndarray
    z: np.ndarray


def evaluate(params: PolicyParams, obs: np.ndarray, actions: ActionBatch, angle_enabled: bool = True) -> Evaluation:
    fw = forward(params, obs)
    n, batch = params.n, fw.obs.shape[0]
    if len(actions) != batch:
        raise DomainError("observation and action batch sizes differ")
    rows = np.arange(batch)
    gate = actions.gate
    is_cnot = gate == CNOT_INDEX
    use_angle = (~is_cnot) & angle_enabled

    logp_g = _log_softmax(fw.gate_logits, _gate_mask(n, batch))
    logp_q1 = _log_softmax(fw.q1_logits)
    h_g, _ = _entropy_terms(logp_g)
    h_q1, _ = _entropy_terms(logp_q1)
    log_prob = logp_g[rows, gate] + logp_q1[rows, actions.q1]
    entropy = h_g + h_q1

    logp_q2 = None
    if n > 1:
        logp_q2 = _log_softmax(fw.q2_logits, _q2_mask(n, actions.q1))
        h_q2, _ = _entropy_terms(logp_q2)
        q2 = np.where(is_cnot, actions.q2, 0)
        lq2 = logp_q2[rows, q2]
        log_prob = log_prob + np.where(is_cnot, lq2, 0.0)
        entropy = entropy + np.where(is_cnot, h_q2, 0.0)

    u = np.clip(actions.theta, THETA_EPS, 1 - THETA_EPS)
    z = np.log(u) - np.log1p(-u)
    sigma = math.exp(fw.log_std)
    log_norm = -0.5 * ((z - fw.mu) / sigma) ** 2 - fw.log_std - _HALF_LOG_2PI
    log_angle = log_norm - np.log(u * (1 - u))
    log_prob = log_prob + np.where(use_angle, log_angle, 0.0)
    entropy = entropy + np.where(use_angle, 0.5 + _HALF_LOG_2PI + fw.log_std, 0.0)

    return Evaluation(fw, actions, log_prob, entropy, fw.value, logp_g, logp_q1, logp_q2, is_cnot, use_angle, z)


def log_prob_entropy(params: PolicyParams, obs: np.ndarray, actions: ActionBatch, angle_enabled: bool = True):
    """``(log_prob, entropy, value)`` arrays for a batch of actions."""
    ev = evaluate(params, obs, actions, angle_enabled)
    return ev.log_prob, ev.entropy, ev.value


def backward(params: PolicyParams, ev: Evaluation, c_logp, c_value, c_entropy) -> np.ndarray:
    """Gradient of ``sum_b c_logp*log_prob + c_value*value + c_entropy*entropy``.

    Coefficients may be scalars or per-sample arrays. Returns a flat vector
    laid out like ``params.flat``.
    """
    fw = ev.fw
    batch = fw.obs.shape[0]
    rows = np.arange(batch)
    c_lp = np.broadcast_to(np.asarray(c_logp, dtype=float), (batch,))
    c_v = np.broadcast_to(np.asarray(c_value, dtype=float), (batch,))
    c_h = np.broadcast_to(np.asarray(c_entropy, dtype=float), (batch,))

    def categorical_grad(logp, idx, weight):
        p = np.exp(logp)
        onehot = np.zeros_like(p)
        onehot[rows, idx] = 1.0
        _, dh = _entropy_terms(logp)
        return weight[:, None] * ((c_lp[:, None]) * (onehot - p) + c_h[:, None] * dh)

    ones = np.ones(batch)
    d_gate = categorical_grad(ev.logp_gate, ev.actions.gate, ones)
    d_q1 = categorical_grad(ev.logp_q1, ev.actions.q1, ones)
    if ev.logp_q2 is not None:
        q2 = np.where(ev.is_cnot, ev.actions.q2, 0)
        d_q2 = categorical_grad(ev.logp_q2, q2, ev.is_cnot.astype(float))
    else:
        d_q2 = np.zeros_like(fw.q2_logits)

    sigma2 = math.exp(2 * fw.log_std)
    resid = ev.z - fw.mu
    use = ev.use_angle.astype(float)
    d_mu = c_lp * use * resid / sigma2
    d_log_std = float(np.sum(c_lp * use * (resid**2 / sigma2 - 1.0)) + np.sum(c_h * use))
    if not fw.log_std_active:
        d_log_std = 0.0

    grads = np.zeros(params.size)
    g = params.unflatten(grads)
    h2 = fw.h2
    for w, b, d in (("Wg", "bg", d_gate), ("Wq1", "bq1", d_q1), ("Wq2", "bq2", d_q2)):
        g[w][:] = h2.T @ d
        g[b][:] = d.sum(axis=0)
    g["Wmu"][:, 0] = h2.T @ d_mu
    g["bmu"][0] = d_mu.sum()
    g["Wv"][:, 0] = h2.T @ c_v
    g["bv"][0] = c_v.sum()
    g["log_std"][0] = d_log_std

    d_h2 = (
        d_gate @ params["Wg"].T
        + d_q1 @ params["Wq1"].T
        + d_q2 @ params["Wq2"].T
        + np.outer(d_mu, params["Wmu"][:, 0])
        + np.outer(c_v, params["Wv"][:, 0])
    )
    d_pre2 = d_h2 * (1 - h2**2)
    g["W2"][:] = fw.h1.T @ d_pre2
    g["b2"][:] = d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ params["W2"].T) * (1 - fw.h1**2)
    g["W1"][:] = fw.obs.T @ d_pre1
    g["b1"][:] = d_pre1.sum(axis=0)
    return grads


def _sample_categorical(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    cdf = np.cumsum(np.exp(logp), axis=1)
    u = (1.0 - rng.random(logp.shape[0]))[:, None] * cdf[:, -1:]
    return np.minimum((cdf < u).sum(axis=1), logp.shape[1] - 1)


@dataclass
class SampleBatch:
    actions: ActionBatch
    log_prob: np.ndarray
    value: np.ndarray
    entropy: np.ndarray


@dataclass
class SampledAction:
    action: AgentAction
    log_prob: float
    value: float
    entropy: float


def sample(
    params: PolicyParams,
    obs: np.ndarray,
    rng: np.random.Generator,
    angle_enabled: bool = True,
    deterministic: bool = False,
) -> SampleBatch:
    """Draw one action per observation row.

    ``deterministic`` takes the argmax of every categorical head and
    ``sigmoid(mu)`` for the angle; no random numbers are consumed then.
    With ``angle_enabled=False`` (two-stage mode) rotations carry the
    placeholder ``theta_unit = 0.5`` and no angle density.
    """
    fw = forward(params, obs)
    n, batch = params.n, fw.obs.shape[0]
    logp_g = _log_softmax(fw.gate_logits, _gate_mask(n, batch))
    logp_q1 = _log_softmax(fw.q1_logits)
    if deterministic:
        gate = logp_g.argmax(axis=1)
        q1 = logp_q1.argmax(axis=1)
    else:
        gate = _sample_categorical(logp_g, rng)
        q1 = _sample_categorical(logp_q1, rng)
    q2 = np.full(batch, -1, dtype=np.int64)
    is_cnot = gate == CNOT_INDEX
    if n > 1:
        logp_q2 = _log_softmax(fw.q2_logits, _q2_mask(n, q1))
        drawn = logp_q2.argmax(axis=1) if deterministic else _sample_categorical(logp_q2, rng)
        q2 = np.where(is_cnot, drawn, -1)
    if deterministic:
        z = fw.mu
    else:
        z = fw.mu + math.exp(fw.log_std) * rng.standard_normal(batch)
    theta = np.clip(_sigmoid(z), THETA_EPS, 1 - THETA_EPS)
    theta = np.where(is_cnot | (not angle_enabled), 0.5, theta)
    actions = ActionBatch(gate.astype(np.int64), q1.astype(np.int64), q2.astype(np.int64), theta)
    ev = evaluate(params, fw.obs, actions, angle_enabled)
    return SampleBatch(actions, ev.log_prob, ev.value, ev.entropy)


def sample_action(params: PolicyParams, obs: np.ndarray, rng: np.random.Generator, **kw) -> SampledAction:
    out = sample(params, np.asarray(obs)[None, :], rng, **kw)
    return SampledAction(out.actions.action(0), float(out.log_prob[0]), float(out.value[0]), float(out.entropy[0]))


def save_params(params: PolicyParams, path: str | Path) -> None:
    """Text checkpoint with shape headers; floats are stored as hex for exact round trips."""
    lines = [f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}", f"n {params.n}", f"hidden {params.hidden}"]
    for name, shape in params.shapes.items():
        lines.append(f"{name} " + " ".join(str(s) for s in shape))
        lines.append(" ".join(float(x).hex() for x in params[name].ravel()))
    Path(path).write_text("\n".join(lines) + "\n")


def load_params(path: str | Path) -> PolicyParams:
    lines = Path(path).read_text().splitlines()
    magic, version = lines[0].split()
    if magic != CHECKPOINT_MAGIC or int(version) != CHECKPOINT_VERSION:
        raise DomainError(f"{path}: not a version-{CHECKPOINT_VERSION} policy checkpoint")
    n = int(lines[1].split()[1])
    hidden = int(lines[2].split()[1])
    params = PolicyParams(n, hidden)
    body = lines[3:]
    for i, (name, shape) in enumerate(params.shapes.items()):
        head = body[2 * i].split()
        if head[0] != name or tuple(int(s) for s in head[1:]) != shape:
            raise DomainError(f"{path}: expected tensor {name} {shape}, found {body[2 * i]!r}")
        values = [float.fromhex(tok) for tok in body[2 * i + 1].split()]
        params[name][:] = np.array(values).reshape(shape)
    return params
