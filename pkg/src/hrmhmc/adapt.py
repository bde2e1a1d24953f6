"""Online adaptation of the mass parameters and the integrator step size."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .metric import MetricModel
from .model import ContractViolation

__all__ = [
    "LearningSchedule",
    "AdaptState",
    "learning_rate",
    "update_mean",
    "clip_gradient",
    "update_clip_threshold",
    "update_mass_params",
    "update_step_size",
    "AdaptToggles",
    "adapt_step",
]


@dataclass(frozen=True)
class LearningSchedule:
    """Constants of the adaptation.

    ``n0`` and ``kappa`` define the shared rate ``(k + n0) ** -kappa``;
    ``clip_quantile`` is the quantile of ``|g - g_bar|`` that the clip
    threshold tracks and ``target_accept`` the step-size target.
    """

    n0: int = 5
    kappa: float = 0.75
    clip_quantile: float = 0.9
    target_accept: float = 0.8

    def __post_init__(self):
        if self.n0 < 0 or int(self.n0) != self.n0:
            raise ContractViolation("n0 must be a non-negative integer")
        if not 0.5 < self.kappa <= 1.0:
            raise ContractViolation("kappa must lie in (1/2, 1]")
        if not 0.0 <= self.clip_quantile <= 1.0:
            raise ContractViolation("clip_quantile must lie in [0, 1]")
        if not 0.0 < self.target_accept < 1.0:
            raise ContractViolation("target_accept must lie in (0, 1)")

    def rate(self, k: float) -> float:
        return learning_rate(k, self.n0, self.kappa)


@dataclass(frozen=True)
class AdaptState:
    """Everything the adaptation carries between iterations.

    ``log_step`` is the Polyak-averaged log step size used by the sampler,
    ``log_step_raw`` the un-averaged iterate, ``n_eff`` the number of sign
    changes of the acceptance error and ``k`` the index of the last
    completed iteration.
    """

    phi: np.ndarray
    g_bar: np.ndarray
    clip_threshold: float
    log_step: float
    log_step_raw: float
    n_eff: int = 0
    sign_prev: int = 0
    k: int = 0

    @classmethod
    def initial(cls, metric: MetricModel, step_size: float = 0.1,
                clip_threshold: float | None = None, phi=None) -> "AdaptState":
        if step_size <= 0:
            raise ContractViolation("step_size must be positive")
        dim = metric.dim
        c = 10.0 * math.sqrt(dim) if clip_threshold is None else float(clip_threshold)
        if not c > 0:
            raise ContractViolation("clip threshold must be positive")
        x0 = math.log(step_size)
        phi0 = metric.init_phi() if phi is None else np.array(phi, dtype=float)
        return cls(phi0, np.zeros(dim), c, x0, x0)

    @property
    def step_size(self) -> float:
        return math.exp(self.log_step)


def learning_rate(k: float, n0: int = 5, kappa: float = 0.75) -> float:
    return float((k + n0) ** (-kappa))


def update_mean(g_bar, g, eta: float) -> np.ndarray:
    """Robbins-Monro running mean ``(1 - eta) g_bar + eta g``."""
    return (1.0 - eta) * np.asarray(g_bar, float) + eta * np.asarray(g, float)


def clip_gradient(g, threshold: float) -> tuple[np.ndarray, int]:
    """Rescale ``g`` to norm ``threshold`` when longer; returns ``(g, clipped)``."""
    if not threshold > 0:
        raise ContractViolation("clip threshold must be positive")
    g = np.asarray(g, dtype=float)
    norm = float(np.linalg.norm(g))
    if norm > threshold:
        return g * (threshold / norm), 1
    return g.copy(), 0


def update_clip_threshold(threshold: float, indicator: float, delta: float,
                          eta: float) -> float:
    """``C * exp(-eta * (indicator - delta))``.

    Fed with ``indicator = 1{|g| <= C}`` this is a stable quantile tracker:
    the long-run frequency of ``|g| <= C`` converges to ``delta``.
    """
    return float(threshold * math.exp(-eta * (indicator - delta)))


def update_mass_params(phi, theta, g_tilde, metric: MetricModel, eta: float,
                       block: int | None = None,
                       max_log_step: float | None = None) -> np.ndarray:
    """Stochastic-gradient step on the per-coordinate loss ``log M + g^2 / M``.

    Returns a new parameter array; only the coordinates of ``block`` (all
    coordinates when ``None``) change.
    """
    phi = np.array(phi, dtype=float)
    g_tilde = np.asarray(g_tilde, dtype=float)
    logm, dphi = metric.grad_log_mass_phi_all(theta, phi)
    # descent direction: -(1 - g^2 / M) * dlogM/dphi
    factor = g_tilde ** 2 * np.exp(-logm) - 1.0
    step = eta * factor[:, None, None] * dphi
    if max_log_step is not None:
        # first-order change of log M_i at theta implied by the step
        change = np.abs(np.einsum("ikf,ikf->i", step, dphi))
        scale = np.minimum(1.0, max_log_step / np.maximum(change, 1e-300))
        step *= scale[:, None, None]
    if block is not None:
        idx = list(metric.blocks.blocks[block])
        phi[idx] += step[idx]
    else:
        phi += step
    return phi


def update_step_size(state: AdaptState, accept_stat: float,
                     schedule: LearningSchedule) -> AdaptState:
    """Kesten-accelerated, Polyak-averaged Robbins-Monro step on ``log eps``.

    Uses ``state.k`` as the current iteration index.
    """
    if not 0.0 <= accept_stat <= 1.0:
        raise ContractViolation(f"acceptance statistic {accept_stat} outside [0, 1]")
    eta0 = learning_rate(state.k, schedule.n0, schedule.kappa)
    eta1 = learning_rate(state.n_eff, schedule.n0, schedule.kappa)
    err = schedule.target_accept - accept_stat
    raw = state.log_step_raw - eta1 * err
    avg = (1.0 - eta0) * state.log_step + eta0 * raw
    sign = int(np.sign(err))
    n_eff = state.n_eff + (1 if sign * state.sign_prev < 0 else 0)
    return replace(state, log_step=avg, log_step_raw=raw, n_eff=n_eff, sign_prev=sign)


@dataclass(frozen=True)
class AdaptToggles:
    clipping: bool = True
    mean_est: bool = True
    adapt_metric: bool = True
    adapt_step_size: bool = True
    max_log_step: float | None = None


def adapt_step(state: AdaptState, theta, grad_log_target, accept_stat: float,
               metric: MetricModel, schedule: LearningSchedule,
               toggles: AdaptToggles = AdaptToggles()) -> tuple[AdaptState, dict]:
    """One full adaptation update after the transition of iteration ``state.k + 1``.

    Pure function of its arguments. Returns the new state and per-iteration
    diagnostics (rate, clip indicator, centred-gradient norm).
    """
    k = state.k + 1
    eta = schedule.rate(k)
    g = np.asarray(grad_log_target, dtype=float)
    g_bar = update_mean(state.g_bar, g, eta) if toggles.mean_est else state.g_bar
    centred = g - g_bar
    threshold = state.clip_threshold
    norm = float(np.linalg.norm(centred))
    if toggles.clipping:
        g_tilde, clipped = clip_gradient(centred, threshold)
        threshold = update_clip_threshold(threshold, 1.0 - clipped,
                                          schedule.clip_quantile, eta)
    else:
        g_tilde, clipped = centred, 0
    phi = state.phi
    if toggles.adapt_metric:
        # coordinates are updated independently, so the block order is immaterial
        phi = update_mass_params(phi, theta, g_tilde, metric, eta,
                                 max_log_step=toggles.max_log_step)
    new = replace(state, phi=phi, g_bar=g_bar, clip_threshold=threshold, k=k)
    if toggles.adapt_step_size and np.isfinite(accept_stat):
        new = update_step_size(new, float(accept_stat), schedule)
    return new, {"eta": eta, "clipped": clipped, "centred_norm": norm}
