import math

import numpy as np
import pytest

from qsynth.env import AgentAction
from qsynth.errors import DomainError
from qsynth.policy import (
    ActionBatch,
    PolicyParams,
    backward,
    evaluate,
    forward,
    load_params,
    log_prob_entropy,
    sample,
    sample_action,
    save_params,
)

CNOT = 3


def random_params(rng, n, hidden=64, scale=0.3):
    p = PolicyParams(n, hidden)
    p.flat[:] = rng.normal(scale=scale, size=p.size)
    p["log_std"][:] = rng.uniform(-1.5, 1.0)
    return p


def random_actions(rng, n, batch):
    acts = []
    for _ in range(batch):
        gate = int(rng.integers(4 if n > 1 else 3))
        q1 = int(rng.integers(n))
        q2 = int(rng.choice([q for q in range(n) if q != q1])) if gate == CNOT else -1
        acts.append(AgentAction(gate, q1, q2, float(rng.uniform(0.05, 0.95))))
    return ActionBatch.stack(acts)


def scalar_objective(params, obs, actions, c, angle_enabled):
    ev = evaluate(params, obs, actions, angle_enabled)
    return float(np.sum(c[0] * ev.log_prob + c[1] * ev.value + c[2] * ev.entropy))


def finite_difference(params, obs, actions, c, angle_enabled, h=1e-5):
    grad = np.zeros(params.size)
    for i in range(params.size):
        old = params.flat[i]
        params.flat[i] = old + h
        up = scalar_objective(params, obs, actions, c, angle_enabled)
        params.flat[i] = old - h
        down = scalar_objective(params, obs, actions, c, angle_enabled)
        params.flat[i] = old
        grad[i] = (up - down) / (2 * h)
    return grad


def relative_error(a, b, floor=1e-3):
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def test_zero_weights_give_uniform_heads():
    p = PolicyParams(2)
    fw = forward(p, np.ones(16))
    np.testing.assert_array_equal(fw.gate_logits, 0)
    np.testing.assert_array_equal(fw.q1_logits, 0)
    assert fw.mu[0] == 0 and fw.value[0] == 0


def test_forward_is_pure(rng):
    p = random_params(rng, 2)
    obs = rng.normal(size=16)
    a, b = forward(p, obs), forward(p, obs)
    np.testing.assert_array_equal(a.gate_logits, b.gate_logits)
    np.testing.assert_array_equal(a.value, b.value)


def test_wrong_obs_length():
    with pytest.raises(DomainError):
        forward(PolicyParams(2), np.zeros(15))


def test_q2_mass_on_only_other_qubit():
    p = PolicyParams(2)
    obs = np.zeros((1, 16))
    for q1 in (0, 1):
        ev = evaluate(p, obs, ActionBatch.stack([AgentAction(CNOT, q1, 1 - q1)]))
        np.testing.assert_allclose(np.exp(ev.logp_q2[0]), np.eye(2)[1 - q1])


def test_uniform_categorical_terms():
    p = PolicyParams(2)
    obs = np.zeros((1, 16))
    lp, ent, _ = log_prob_entropy(p, obs, ActionBatch.stack([AgentAction(CNOT, 0, 1)]))
    assert lp[0] == pytest.approx(math.log(1 / 4) + math.log(1 / 2) + 0.0, abs=1e-12)
    # gate and q1 heads only; q2 has one admissible choice so zero entropy
    assert ent[0] == pytest.approx(math.log(4) + math.log(2), abs=1e-12)


def test_rotation_log_prob_includes_squash_term():
    p = PolicyParams(2)
    theta = 0.3
    ev = evaluate(p, np.zeros((1, 16)), ActionBatch.stack([AgentAction(1, 1, -1, theta)]))
    z = math.log(theta / (1 - theta))
    normal = -0.5 * z * z - 0.5 * math.log(2 * math.pi)
    expected = math.log(1 / 4) + math.log(1 / 2) + normal - math.log(theta * (1 - theta))
    assert ev.log_prob[0] == pytest.approx(expected, abs=1e-12)


def test_cnot_angle_term_is_zero(rng):
    p = random_params(rng, 3)
    obs = rng.normal(size=(1, 32))
    a = evaluate(p, obs, ActionBatch.stack([AgentAction(CNOT, 0, 2, 0.1)]))
    b = evaluate(p, obs, ActionBatch.stack([AgentAction(CNOT, 0, 2, 0.9)]))
    assert a.log_prob[0] == b.log_prob[0]


def test_two_stage_mode_drops_angle(rng):
    p = random_params(rng, 2)
    obs = rng.normal(size=(1, 16))
    acts = ActionBatch.stack([AgentAction(0, 1, -1, 0.5)])
    with_angle = evaluate(p, obs, acts, angle_enabled=True)
    without = evaluate(p, obs, acts, angle_enabled=False)
    assert without.log_prob[0] != with_angle.log_prob[0]
    out = sample(p, rng.normal(size=(64, 16)), rng, angle_enabled=False)
    rot = out.actions.gate != CNOT
    np.testing.assert_array_equal(out.actions.theta[rot], 0.5)


def test_sample_consistent_with_reevaluation(rng):
    for n in (1, 2, 3):
        p = random_params(rng, n)
        obs = rng.normal(size=(200, 4 << n))
        out = sample(p, obs, rng)
        lp, ent, val = log_prob_entropy(p, obs, out.actions)
        np.testing.assert_allclose(out.log_prob, lp, atol=1e-9, rtol=0)
        np.testing.assert_array_equal(out.value, val)
        assert np.all(np.isfinite(out.log_prob))
        cnot = out.actions.gate == CNOT
        assert np.all(out.actions.q2[cnot] != out.actions.q1[cnot])
        if n == 1:
            assert not cnot.any()


def test_sample_deterministic_given_rng(rng):
    p = random_params(rng, 2)
    obs = rng.normal(size=(10, 16))
    a = sample(p, obs, np.random.default_rng(3))
    b = sample(p, obs, np.random.default_rng(3))
    for field in ("gate", "q1", "q2", "theta"):
        np.testing.assert_array_equal(getattr(a.actions, field), getattr(b.actions, field))


def test_single_sample_api(rng):
    p = PolicyParams.initialize(2, rng)
    s = sample_action(p, np.zeros(16), rng)
    assert isinstance(s.action, AgentAction)
    assert math.isfinite(s.log_prob)


def test_small_sigma_concentrates_angle():
    p = PolicyParams(2)
    p["bmu"][:] = 0.7
    p["log_std"][:] = -5.0
    rng = np.random.default_rng(0)
    obs = np.zeros((10_000, 16))
    p["bg"][:] = [10.0, -10.0, -10.0, -10.0]  # always Rx
    theta = sample(p, obs, rng).actions.theta
    expected = 1 / (1 + math.exp(-0.7))
    stderr = theta.std(ddof=1) / math.sqrt(theta.size)
    assert abs(theta.mean() - expected) < 3 * max(stderr, 1e-12) + 1e-12
    assert theta.std() < 1e-2


def test_softmax_heads_normalized(rng):
    p = random_params(rng, 3, scale=1.0)
    obs = rng.normal(size=(50, 32))
    ev = evaluate(p, obs, random_actions(rng, 3, 50))
    for logp in (ev.logp_gate, ev.logp_q1, ev.logp_q2):
        np.testing.assert_allclose(np.exp(logp).sum(axis=1), 1.0, atol=1e-12)
    assert np.all(ev.logp_gate[np.arange(50), ev.actions.gate] <= 0)


def test_zero_coefficients_zero_gradient(rng):
    p = random_params(rng, 2)
    obs = rng.normal(size=(5, 16))
    ev = evaluate(p, obs, random_actions(rng, 2, 5))
    np.testing.assert_array_equal(backward(p, ev, 0.0, 0.0, 0.0), 0)


def test_q2_head_untouched_without_cnot(rng):
    p = random_params(rng, 3)
    acts = ActionBatch.stack([AgentAction(g, 1, -1, 0.4) for g in (0, 1, 2)])
    ev = evaluate(p, rng.normal(size=(3, 32)), acts)
    g = p.unflatten(backward(p, ev, 1.0, 0.7, 0.3))
    np.testing.assert_array_equal(g["Wq2"], 0)
    np.testing.assert_array_equal(g["bq2"], 0)


def test_log_std_gradient_zero_when_clamped(rng):
    p = random_params(rng, 2)
    p["log_std"][:] = 3.0
    ev = evaluate(p, rng.normal(size=(4, 16)), random_actions(rng, 2, 4))
    assert p.unflatten(backward(p, ev, 1.0, 0.0, 1.0))["log_std"][0] == 0


@pytest.mark.parametrize("seed", range(3))
def test_backward_matches_finite_differences_small(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 4))
    p = random_params(rng, n, hidden=8)
    obs = rng.normal(size=(3, 4 << n))
    acts = random_actions(rng, n, 3)
    c = rng.normal(size=(3, 3))
    ev = evaluate(p, obs, acts)
    analytic = backward(p, ev, c[0], c[1], c[2])
    numeric = finite_difference(p, obs, acts, c, True)
    assert relative_error(analytic, numeric).max() < 1e-4


def test_checkpoint_round_trip(tmp_path, rng):
    p = PolicyParams.initialize(3, rng)
    p.flat[:] += rng.normal(scale=1e-3, size=p.size)
    save_params(p, tmp_path / "ckpt.txt")
    q = load_params(tmp_path / "ckpt.txt")
    assert q.n == 3 and q.hidden == 64
    np.testing.assert_array_equal(p.flat, q.flat)
    assert p.flat.tobytes() == q.flat.tobytes()


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "bad.txt").write_text("nope 1\n")
    with pytest.raises(DomainError):
        load_params(tmp_path / "bad.txt")
