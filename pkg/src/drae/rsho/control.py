"""Low-level execution layer: adaptive PID control and a 2-link planar
arm driven through a damped pseudo-inverse Jacobian.

The PID policy is stochastic (Gaussian noise around the PID mean); every
test that needs determinism zeroes the noise covariance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import InvalidParameter
from ..numerics import as_vector

INTEGRAL_CLAMP = 100.0


@dataclass
class PidController:
    kp: float
    ki: float
    kd: float
    noise_cov_diag: np.ndarray
    integral: np.ndarray = field(default=None)
    prev_error: np.ndarray = field(default=None)

    def __post_init__(self):
        if min(self.kp, self.ki, self.kd) < 0:
            raise InvalidParameter("PID gains must be non-negative")
        dim = self.noise_cov_diag.size
        if self.integral is None:
            self.integral = np.zeros(dim)
        if self.prev_error is None:
            self.prev_error = np.zeros(dim)

    def reset(self):
        self.integral = np.zeros_like(self.integral)
        self.prev_error = np.zeros_like(self.prev_error)

    def gains(self) -> np.ndarray:
        return np.array([self.kp, self.ki, self.kd])


def pid_action(
    ctrl: PidController, x_des, x, dt: float, rng: np.random.Generator | None
) -> np.ndarray:
    """One PID step: kp*e + ki*int(e) + kd*de/dt plus Gaussian noise.

    The integral accumulator is clamped to +-100 per component to bound
    windup; pass rng=None (or zero covariance) for the deterministic mean.
    """
    if dt <= 0:
        raise InvalidParameter(f"dt must be positive, got {dt}")
    e = as_vector(x_des) - as_vector(x)
    ctrl.integral = np.clip(ctrl.integral + e * dt, -INTEGRAL_CLAMP, INTEGRAL_CLAMP)
    derivative = (e - ctrl.prev_error) / dt
    ctrl.prev_error = e.copy()
    mean = ctrl.kp * e + ctrl.ki * ctrl.integral + ctrl.kd * derivative
    if rng is None or not np.any(ctrl.noise_cov_diag > 0):
        return mean
    return mean + rng.normal(0.0, 1.0, e.size) * np.sqrt(ctrl.noise_cov_diag)


class IntegratorPlant:
    """Unit-gain integrator tracking a constant reference.

    episode() returns the mean squared tracking error of a controller,
    deterministically (noise off), for use as a gain-adaptation target.
    """

    def __init__(self, target: float = 1.0, steps: int = 200, dt: float = 0.01):
        self.target = np.array([target])
        self.steps = steps
        self.dt = dt

    def episode(self, kp: float, ki: float, kd: float) -> float:
        # scalar replay of the pid_action update order, kept in plain
        # floats because adaptation calls this thousands of times
        target = float(self.target[0])
        x = 0.0
        integral = 0.0
        prev_e = 0.0
        sq = 0.0
        for _ in range(self.steps):
            e = target - x
            integral = min(max(integral + e * self.dt, -INTEGRAL_CLAMP),
                           INTEGRAL_CLAMP)
            u = kp * e + ki * integral + kd * (e - prev_e) / self.dt
            prev_e = e
            x += u * self.dt
            sq += (target - x) ** 2
        return sq / self.steps


GAIN_LOW, GAIN_HIGH = 0.0, 10.0


def adapt_gains(
    ctrl: PidController,
    episodes: int,
    env: IntegratorPlant,
    rng: np.random.Generator | None = None,
    perturbation: float = 1e-3,
    step: float = 1e-2,
) -> PidController:
    """Tune gains by finite-difference descent on episode tracking error.

    Central differences per gain, projection to [0, 10], and a step is
    kept only if it does not increase the episode error, so adaptation
    never ends worse than it started on the training reference.
    """
    if episodes < 1:
        raise InvalidParameter("episodes must be >= 1")
    gains = ctrl.gains()
    for _ in range(episodes):
        current = env.episode(*gains)
        grad = np.zeros(3)
        for i in range(3):
            up = gains.copy()
            down = gains.copy()
            up[i] = min(up[i] + perturbation, GAIN_HIGH)
            down[i] = max(down[i] - perturbation, GAIN_LOW)
            span = up[i] - down[i]
            if span == 0:
                continue
            grad[i] = (env.episode(*up) - env.episode(*down)) / span
        candidate = np.clip(gains - step * grad, GAIN_LOW, GAIN_HIGH)
        if env.episode(*candidate) <= current:
            gains = candidate
    return PidController(
        kp=float(gains[0]),
        ki=float(gains[1]),
        kd=float(gains[2]),
        noise_cov_diag=ctrl.noise_cov_diag.copy(),
    )


def wrap_angle(q: np.ndarray) -> np.ndarray:
    """Wrap each angle to (-pi, pi]."""
    wrapped = np.remainder(q + np.pi, 2.0 * np.pi) - np.pi
    wrapped[wrapped == -np.pi] = np.pi
    return wrapped


@dataclass
class ArmState:
    q: np.ndarray  # 2 joint angles, radians
    q_nom: np.ndarray
    link_lengths: tuple[float, float]
    kappa: float = 0.0

    def __post_init__(self):
        if min(self.link_lengths) <= 0:
            raise InvalidParameter("link lengths must be positive")
        if self.kappa < 0:
            raise InvalidParameter("kappa must be >= 0")
        self.q = wrap_angle(as_vector(self.q, dim=2))
        self.q_nom = as_vector(self.q_nom, dim=2)


def forward_kinematics(arm: ArmState) -> np.ndarray:
    l1, l2 = arm.link_lengths
    q1, q2 = arm.q
    return np.array(
        [
            l1 * np.cos(q1) + l2 * np.cos(q1 + q2),
            l1 * np.sin(q1) + l2 * np.sin(q1 + q2),
        ]
    )


def jacobian(arm: ArmState) -> np.ndarray:
    l1, l2 = arm.link_lengths
    q1, q2 = arm.q
    s1, c1 = np.sin(q1), np.cos(q1)
    s12, c12 = np.sin(q1 + q2), np.cos(q1 + q2)
    return np.array(
        [
            [-l1 * s1 - l2 * s12, -l2 * s12],
            [l1 * c1 + l2 * c12, l2 * c12],
        ]
    )


def arm_step(arm: ArmState, x_des, damping: float, dt: float) -> ArmState:
    """One Euler step of qdot = J#(x_des - x) + kappa (q_nom - q).

    J# is the damped pseudo-inverse J^T (J J^T + damping^2 I)^-1, which
    stays bounded through singular poses for any damping > 0.
    """
    if damping <= 0:
        raise InvalidParameter("damping must be positive")
    if dt <= 0:
        raise InvalidParameter("dt must be positive")
    target = as_vector(x_des, dim=2)
    x = forward_kinematics(arm)
    jac = jacobian(arm)
    jjt = jac @ jac.T + damping**2 * np.eye(2)
    j_pinv = jac.T @ np.linalg.solve(jjt, np.eye(2))
    qdot = j_pinv @ (target - x) + arm.kappa * (arm.q_nom - arm.q)
    return ArmState(
        q=wrap_angle(arm.q + qdot * dt),
        q_nom=arm.q_nom.copy(),
        link_lengths=arm.link_lengths,
        kappa=arm.kappa,
    )
