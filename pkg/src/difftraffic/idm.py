"""Modified Intelligent Driver Model kernel.

All functions broadcast over numpy arrays, so one call evaluates the model for
every vehicle of a frame (or every trajectory of a batch) at once.  Parameters
may be scalars or per-vehicle arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import NamedTuple

import numpy as np

EPS_GAP = 0.1  # m, distance gaps are clamped to this before division
OPTIMIZABLE = ("a_max", "a_pref", "T_pref", "s_min", "v_targ")


class InvalidArgument(ValueError):
    pass


@dataclass(frozen=True)
class IdmParams:
    """Driver-behaviour parameters.

    The five fields listed in ``OPTIMIZABLE`` are fitted; ``delta`` and
    ``a_min`` stay fixed.  Any field may hold an array for per-vehicle values.
    """

    a_max: float | np.ndarray = 10.0
    a_pref: float | np.ndarray = 2.0
    s_min: float | np.ndarray = 5.0
    T_pref: float | np.ndarray = 1.0
    v_targ: float | np.ndarray = 50.0
    delta: float = 4.0
    a_min: float | np.ndarray = -10.0

    def validate(self) -> None:
        for name in ("a_max", "a_pref", "s_min", "T_pref", "v_targ"):
            val = np.asarray(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(val)) or np.any(val <= 0):
                raise InvalidArgument(f"{name} must be finite and > 0")
        a_min = np.asarray(self.a_min, dtype=float)
        if not np.all(np.isfinite(a_min)) or np.any(a_min >= 0):
            raise InvalidArgument("a_min must be finite and < 0")

    def optimizable(self) -> np.ndarray:
        """Stack the fitted fields as rows, in ``OPTIMIZABLE`` order."""
        return np.stack([np.asarray(getattr(self, n), dtype=float) for n in OPTIMIZABLE])

    def with_optimizable(self, values: np.ndarray) -> IdmParams:
        return replace(self, **{n: values[i] for i, n in enumerate(OPTIMIZABLE)})

    def take(self, index) -> IdmParams:
        """Select vehicles from per-vehicle parameter arrays (scalars pass through)."""
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val[index] if np.ndim(val) > 0 else val
        return IdmParams(**out)

    def broadcast(self, n: int) -> IdmParams:
        out = {}
        for f in fields(self):
            val = getattr(self, f.name)
            out[f.name] = val if f.name == "delta" else np.broadcast_to(np.asarray(val, dtype=float), (n,)).copy()
        return IdmParams(**out)


class IdmGradient(NamedTuple):
    """Partials of the clamped acceleration."""

    d_v: np.ndarray
    d_dp: np.ndarray
    d_dv: np.ndarray
    d_amax: np.ndarray
    d_apref: np.ndarray
    d_smin: np.ndarray
    d_Tpref: np.ndarray
    d_vtarg: np.ndarray

    def params(self) -> np.ndarray:
        """Parameter partials stacked in ``OPTIMIZABLE`` order."""
        return np.stack(np.broadcast_arrays(self.d_amax, self.d_apref, self.d_Tpref, self.d_smin, self.d_vtarg))


def softplus(x):
    """log(1 + exp(x)) without overflow in either tail."""
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def optimal_spacing(params: IdmParams, v, dv):
    """Desired gap before the softplus floor; can be negative when closing fast."""
    return params.s_min + v * params.T_pref + v * dv / (2.0 * np.sqrt(params.a_max * params.a_pref))


def _check_inputs(v, dp, dv, dt) -> None:
    for name, x in (("v", v), ("dp", dp), ("dv", dv), ("dt", dt)):
        if not np.all(np.isfinite(x)):
            raise InvalidArgument(f"non-finite {name}")
    if np.any(np.asarray(v) < 0):
        raise InvalidArgument("speed must be >= 0")
    if np.any(np.asarray(dt) <= 0):
        raise InvalidArgument("dt must be > 0")


def idm_acceleration(params: IdmParams, v, dp, dv, dt, check: bool = True):
    """Clamped IDM acceleration a* >= max(-v/dt, a_min)."""
    if check:
        _check_inputs(v, dp, dv, dt)
    dp = np.maximum(dp, EPS_GAP)
    s_star = softplus(optimal_spacing(params, v, dv))
    a_raw = params.a_max * (1.0 - (v / params.v_targ) ** params.delta - (s_star / dp) ** 2)
    a_lb = np.maximum(-v / dt, params.a_min)
    return a_lb + softplus(a_raw - a_lb)


def idm_acceleration_grad(params: IdmParams, v, dp, dv, dt, check: bool = True):
    """Acceleration plus its analytic partials as an :class:`IdmGradient`.

    At ``-v/dt == a_min`` the lower bound is differentiated along the ``a_min``
    branch.  Where ``dp`` is clamped its partial is zero.
    """
    if check:
        _check_inputs(v, dp, dv, dt)
    v = np.asarray(v, dtype=float)
    dp_raw = np.asarray(dp, dtype=float)
    dp = np.maximum(dp_raw, EPS_GAP)
    a_max, a_pref = params.a_max, params.a_pref
    sqrt_ab = np.sqrt(a_max * a_pref)

    s_opt = params.s_min + v * params.T_pref + v * dv / (2.0 * sqrt_ab)
    s_star = softplus(s_opt)
    ratio = v / params.v_targ
    speed_term = ratio ** params.delta
    q = s_star / dp
    bracket = 1.0 - speed_term - q * q
    a_raw = a_max * bracket

    neg_stop = -v / dt
    on_stop_branch = neg_stop > params.a_min
    a_lb = np.where(on_stop_branch, neg_stop, params.a_min)
    z = a_raw - a_lb
    acc = a_lb + softplus(z)

    w = sigmoid(z)  # d a* / d a_raw
    # d a* / d s_opt
    d_sopt = w * (-2.0 * a_max * q / dp) * sigmoid(s_opt)

    d_v_speed = -a_max * params.delta * ratio ** (params.delta - 1.0) / params.v_targ
    d_lb_dv = np.where(on_stop_branch, -1.0 / dt, 0.0)
    d_v = w * d_v_speed + d_sopt * (params.T_pref + dv / (2.0 * sqrt_ab)) + (1.0 - w) * d_lb_dv
    d_dp = np.where(dp_raw > EPS_GAP, w * 2.0 * a_max * q * q / dp, 0.0)
    d_dv = d_sopt * v / (2.0 * sqrt_ab)

    vdv = v * dv
    d_amax = w * bracket + d_sopt * (-vdv / (4.0 * a_max * sqrt_ab))
    d_apref = d_sopt * (-vdv / (4.0 * a_pref * sqrt_ab))
    d_smin = d_sopt
    d_Tpref = d_sopt * v
    d_vtarg = w * a_max * params.delta * speed_term / params.v_targ

    grad = IdmGradient(d_v, d_dp, d_dv, d_amax, d_apref, d_smin, d_Tpref, d_vtarg)
    return acc, grad
