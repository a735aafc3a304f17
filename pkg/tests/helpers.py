"""Shared gradient checks for whole rollouts: float finite differences and a
frozen high-precision oracle."""

import json
from pathlib import Path

import numpy as np

from difftraffic import engine
from difftraffic.idm import OPTIMIZABLE, IdmParams

H = 1e-3  # near eps**(1/5), the best step for a five-point stencil


def _quadratic(positions, target, weights):
    r = positions - target
    return 0.5 * float(np.sum(weights * r * r)), weights * r


def _rel_err(analytic, fd, loss_scale, tol=1e-4):
    """Componentwise relative error.

    A central difference cannot resolve derivatives below roughly
    eps * |L| / H, so components under that noise floor (scaled by ``tol``)
    are measured against the floor instead of their own magnitude.
    """
    analytic, fd = np.atleast_1d(analytic), np.atleast_1d(fd)
    noise = 16 * np.finfo(float).eps * max(abs(loss_scale), 1.0) / H
    return float(np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), noise / tol)))


def _derivative(f) -> float:
    """Five-point central difference of ``f(delta)`` at zero; truncation is O(H^4)."""
    return (8 * (f(H) - f(-H)) - (f(2 * H) - f(-2 * H))) / (12 * H)


def random_params(rng, n=None):
    return IdmParams(a_max=rng.uniform(5, 10, n), a_pref=rng.uniform(0.5, 4, n),
                     s_min=rng.uniform(1, 6, n), T_pref=rng.uniform(0.5, 2.5, n),
                     v_targ=rng.uniform(20, 45, n))


def virtual_leader_case(rng, steps=50, dt=0.1):
    v0 = rng.uniform(8, 25)
    return dict(p0=0.0, v0=v0, params=random_params(rng),
                dp_seq=rng.uniform(15, 60, steps), dv_seq=rng.uniform(-2, 2, steps), dt=dt)


def virtual_leader_fd_error(case, rng) -> float:
    """Worst relative error over the 5 params, the leader sequences and v0."""
    steps = case["dp_seq"].shape[0]
    buf = engine.rollout_virtual_leader(**case)
    target = buf.positions + rng.normal(0, 1, steps + 1)
    weights = rng.uniform(0.5, 1.5, steps + 1)

    def loss(c):
        buf = engine.rollout_virtual_leader(c["p0"], c["v0"], c["params"], c["dp_seq"], c["dv_seq"], c["dt"])
        return _quadratic(buf.positions, target, weights)

    scale, g = _quadratic(buf.positions, target, weights)
    adj = engine.backward(buf, g)

    errs = []
    base = case["params"].optimizable()
    fd = np.empty(5)
    for j in range(5):
        def shifted(d):
            p = base.copy()
            p[j] += d
            return loss(case | {"params": case["params"].with_optimizable(p)})[0]
        fd[j] = _derivative(shifted)
    errs.append(_rel_err(adj.params, fd, scale))

    fd_v0 = _derivative(lambda d: loss(case | {"v0": case["v0"] + d})[0])
    errs.append(_rel_err(adj.speeds0, fd_v0, scale))

    for key, analytic in (("dp_seq", adj.gaps), ("dv_seq", adj.speed_diffs)):
        for k in rng.choice(steps, 3, replace=False):
            def shifted(d):
                seq = case[key].copy()
                seq[k] += d
                return loss(case | {key: seq})[0]
            fd_k = _derivative(shifted)
            errs.append(_rel_err(analytic[k], fd_k, scale))
    return max(errs)


def chain_case(rng, n=4, steps=50, dt=0.1):
    """A platoon on an open road: vehicle i follows i+1, the front one is free."""
    params = random_params(rng, n)
    gaps = rng.uniform(15, 40, n - 1)
    lengths = np.full(n, 5.0)
    pos = np.concatenate([[0.0], np.cumsum(gaps + 5.0)])
    leader = np.append(np.arange(1, n), engine.NO_LEADER)
    return engine.WorldState(pos, rng.uniform(10, 20, n), lengths, leader, params), steps, dt


def chain_fd_error(state, steps, dt, rng) -> float:
    n = len(state)
    buf = engine.rollout(state, steps, dt)
    target = buf.positions + rng.normal(0, 1, (steps + 1, n))

    def loss(s):
        buf = engine.rollout(s, steps, dt)
        return _quadratic(buf.positions, target, 1.0)

    scale, g = _quadratic(buf.positions, target, 1.0)
    adj = engine.backward(buf, g)

    def with_(**kw):
        d = dict(positions=state.positions, speeds=state.speeds, lengths=state.lengths,
                 leader=state.leader, params=state.params)
        d.update(kw)
        return engine.WorldState(**d)

    errs = []
    for field, analytic in (("positions", adj.positions0), ("speeds", adj.speeds0)):
        base = getattr(state, field)
        fd = np.empty(n)
        for i in range(n):
            def shifted(d):
                x = base.copy()
                x[i] += d
                return loss(with_(**{field: x}))[0]
            fd[i] = _derivative(shifted)
        errs.append(_rel_err(analytic, fd, scale))
    base = state.params.optimizable()
    for j in range(len(OPTIMIZABLE)):
        fd = np.empty(n)
        for i in range(n):
            def shifted(d):
                p = base.copy()
                p[j, i] += d
                return loss(with_(params=state.params.with_optimizable(p)))[0]
            fd[i] = _derivative(shifted)
        errs.append(_rel_err(adj.params[j], fd, scale))
    return max(errs)


ROLLOUT_ORACLE = json.loads((Path(__file__).parent / "data" / "rollout_oracle.json").read_text())


def _oracle_params(d, i=None):
    pick = (lambda v: v[i]) if i is not None else np.asarray
    return IdmParams(**{name: pick(d[name]) for name in OPTIMIZABLE})


def oracle_gradients(case, kind):
    """Analytic adjoint for a frozen oracle case, keyed like ``case['grad']``."""
    dt = ROLLOUT_ORACLE["dt"]
    steps = ROLLOUT_ORACLE["steps"]
    target, weights = np.asarray(case["target"]), np.asarray(case["weights"])
    if kind == "leader":
        buf = engine.rollout_virtual_leader(case["p0"], case["v0"], _oracle_params(case["params"], 0),
                                            case["dp_seq"], case["dv_seq"], dt)
        _, g = _quadratic(buf.positions, target, weights)
        adj = engine.backward(buf, g)
        out = {name: [float(adj.params[j])] for j, name in enumerate(OPTIMIZABLE)}
        out.update(v0=[float(adj.speeds0)], dp_seq=adj.gaps.tolist(), dv_seq=adj.speed_diffs.tolist())
        return out
    n = len(case["positions"])
    leader = np.append(np.arange(1, n), engine.NO_LEADER)
    state = engine.WorldState(np.asarray(case["positions"]), np.asarray(case["speeds"]),
                              np.asarray(case["lengths"]), leader, _oracle_params(case["params"]))
    buf = engine.rollout(state, steps, dt)
    _, g = _quadratic(buf.positions, target.reshape(steps + 1, n), weights.reshape(steps + 1, n))
    adj = engine.backward(buf, g)
    out = {name: adj.params[j].tolist() for j, name in enumerate(OPTIMIZABLE)}
    out.update(positions=adj.positions0.tolist(), speeds=adj.speeds0.tolist())
    return out


def oracle_rel_error(case, kind) -> float:
    """Worst componentwise relative error against the exact gradient; exact
    zeros must come out as zeros."""
    ours = oracle_gradients(case, kind)
    exact = np.concatenate([np.asarray(case["grad"][k], dtype=float) for k in case["grad"]])
    got = np.concatenate([np.asarray(ours[k], dtype=float) for k in case["grad"]])
    return float(np.max(np.abs(got - exact) / np.maximum(np.abs(exact), np.finfo(float).tiny)))
