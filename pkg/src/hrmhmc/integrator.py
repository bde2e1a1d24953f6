"""Explicit symmetric integrators for block-diagonal position-dependent masses.

Two schemes are provided:

* ``two_block``: the two-block hierarchical leapfrog. Block 0 (``A``) must
  have a position-independent mass; block 1 (``B``) may depend on ``A``.
* ``multi_block``: the palindromic splitting ``H = H0 + sum_k H_k`` with
  ``H0 = U + 0.5 log det M`` and exact block flows of
  ``H_k = 0.5 p_k' M_k(theta_-k)^-1 p_k`` composed in a given order.

The kernels update ``theta``, ``p`` and the cached ``grad U`` in place and
leave ``logm``/``gw`` evaluated at the new position. Non-finite values are
propagated, never raised.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

from .metric import MetricModel, eval_all, eval_coords, hamiltonian_kernel, scatter_grad
from .model import ContractViolation, TargetModel, potential_kernel

__all__ = [
    "MULTI_BLOCK",
    "TWO_BLOCK",
    "PhasePoint",
    "Integrator",
    "xi_terms",
    "block_flow",
    "leapfrog_two_block",
    "leapfrog_multi_block",
    "split_hamiltonian",
]

MULTI_BLOCK = 0
TWO_BLOCK = 1


@nb.njit(cache=True, error_model="numpy")
def _block_flow(k, h, theta, p, fidx, nterm, phi, bptr, bidx, logm, gw):
    idx = bidx[bptr[k]:bptr[k + 1]]
    eval_coords(theta, idx, fidx, nterm, phi, logm, gw)
    coef = np.empty(idx.shape[0])
    for a in range(idx.shape[0]):
        m = idx[a]
        v = p[m] * np.exp(-logm[m])
        coef[a] = 0.5 * h * p[m] * v
        theta[m] += h * v
    scatter_grad(idx, coef, fidx, nterm, phi, gw, p)


@nb.njit(cache=True, error_model="numpy")
def _kick_h0(scale, p, gU, fidx, nterm, phi, logm, gw):
    # p -= scale * grad H0, with logm/gw current
    n = p.shape[0]
    g = gU.copy()
    scatter_grad(np.arange(n), np.full(n, 0.5), fidx, nterm, phi, gw, g)
    for i in range(n):
        p[i] -= scale * g[i]


@nb.njit(cache=True, error_model="numpy")
def multi_block_step(theta, p, gU, eps, mid, data, fidx, nterm, phi,
                     bptr, bidx, order, logm, gw):
    eval_all(theta, fidx, nterm, phi, logm, gw)
    _kick_h0(0.5 * eps, p, gU, fidx, nterm, phi, logm, gw)
    K = order.shape[0]
    for r in range(K - 1):
        _block_flow(order[r], 0.5 * eps, theta, p, fidx, nterm, phi, bptr, bidx, logm, gw)
    _block_flow(order[K - 1], eps, theta, p, fidx, nterm, phi, bptr, bidx, logm, gw)
    for r in range(K - 2, -1, -1):
        _block_flow(order[r], 0.5 * eps, theta, p, fidx, nterm, phi, bptr, bidx, logm, gw)
    U, g = potential_kernel(mid, theta, data)
    gU[:] = g
    eval_all(theta, fidx, nterm, phi, logm, gw)
    _kick_h0(0.5 * eps, p, gU, fidx, nterm, phi, logm, gw)
    return U


@nb.njit(cache=True, error_model="numpy")
def _xi_a(idx_a, idx_b, pb, gU, fidx, nterm, phi, logm, gw, n):
    # Xi_A on the full-length vector (entries outside A are meaningless)
    out = np.zeros(n)
    coef = np.empty(idx_b.shape[0])
    for a in range(idx_b.shape[0]):
        j = idx_b[a]
        coef[a] = 0.5 * (pb[a] * pb[a] * np.exp(-logm[j]) - 1.0)
    scatter_grad(idx_b, coef, fidx, nterm, phi, gw, out)
    for a in range(idx_a.shape[0]):
        i = idx_a[a]
        out[i] -= gU[i]
    return out


@nb.njit(cache=True, error_model="numpy")
def two_block_step(theta, p, gU, eps, mid, data, fidx, nterm, phi,
                   bptr, bidx, order, logm, gw):
    n = theta.shape[0]
    ia = bidx[bptr[0]:bptr[1]]
    ib = bidx[bptr[1]:bptr[2]]
    eval_all(theta, fidx, nterm, phi, logm, gw)
    inv_old = np.empty(ib.shape[0])
    pb = np.empty(ib.shape[0])
    for a in range(ib.shape[0]):
        j = ib[a]
        inv_old[a] = np.exp(-logm[j])
        p[j] -= 0.5 * eps * gU[j]
        pb[a] = p[j]
    xa = _xi_a(ia, ib, pb, gU, fidx, nterm, phi, logm, gw, n)
    for a in range(ia.shape[0]):
        i = ia[a]
        p[i] += 0.5 * eps * xa[i]
        theta[i] += eps * p[i] * np.exp(-logm[i])
    eval_coords(theta, ib, fidx, nterm, phi, logm, gw)
    for a in range(ib.shape[0]):
        j = ib[a]
        theta[j] += 0.5 * eps * (inv_old[a] + np.exp(-logm[j])) * pb[a]
    U, g = potential_kernel(mid, theta, data)
    gU[:] = g
    eval_all(theta, fidx, nterm, phi, logm, gw)
    for a in range(ib.shape[0]):
        j = ib[a]
        p[j] -= 0.5 * eps * gU[j]
    xa = _xi_a(ia, ib, pb, gU, fidx, nterm, phi, logm, gw, n)
    for a in range(ia.shape[0]):
        i = ia[a]
        p[i] += 0.5 * eps * xa[i]
    return U


@nb.njit(cache=True, error_model="numpy")
def integrator_step(kind, theta, p, gU, eps, mid, data, fidx, nterm, phi,
                    bptr, bidx, order, logm, gw):
    if kind == 1:
        return two_block_step(theta, p, gU, eps, mid, data, fidx, nterm, phi,
                              bptr, bidx, order, logm, gw)
    return multi_block_step(theta, p, gU, eps, mid, data, fidx, nterm, phi,
                            bptr, bidx, order, logm, gw)


@nb.njit(cache=True, error_model="numpy")
def run_steps(kind, n_steps, theta, p, gU, eps, mid, data, fidx, nterm, phi,
              bptr, bidx, order):
    """Integrate ``n_steps`` steps; returns ``(U, H)`` at the end."""
    n = theta.shape[0]
    logm = np.zeros(n)
    gw = np.zeros((n, 2))
    U = 0.0
    for _ in range(n_steps):
        U = integrator_step(kind, theta, p, gU, eps, mid, data, fidx, nterm, phi,
                            bptr, bidx, order, logm, gw)
    if n_steps == 0:
        U, g = potential_kernel(mid, theta, data)
        gU[:] = g
        eval_all(theta, fidx, nterm, phi, logm, gw)
    return U, hamiltonian_kernel(U, p, logm)


# ----------------------------------------------------------------------------
# Python API


@dataclass(frozen=True)
class PhasePoint:
    theta: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=float)
        p = np.array(self.p, dtype=float)
        if theta.shape != p.shape or theta.ndim != 1:
            raise ContractViolation("theta and p must be vectors of equal length")
        object.__setattr__(self, "theta", theta)
        object.__setattr__(self, "p", p)

    def flip(self) -> "PhasePoint":
        return PhasePoint(self.theta, -self.p)

    @property
    def finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)) and np.all(np.isfinite(self.p)))


class Integrator:
    """Binds a model, a metric and its current parameters to one scheme."""

    def __init__(self, model: TargetModel, metric: MetricModel, phi=None,
                 scheme: str = "multi_block", flow_order=None):
        if metric.dim != model.dim:
            raise ContractViolation("metric and model dimensions differ")
        if scheme not in ("multi_block", "two_block"):
            raise ContractViolation(f"unknown integrator {scheme!r}")
        if scheme == "two_block":
            if metric.blocks.n_blocks != 2:
                raise ContractViolation("two_block integrator needs exactly two blocks")
            if not metric.constant_in_theta(0):
                raise ContractViolation(
                    "two_block integrator needs a position-independent mass on block 0")
        self.model = model
        self.metric = metric
        self.phi = metric.init_phi() if phi is None else np.ascontiguousarray(phi, float)
        self.scheme = scheme
        self.kind = TWO_BLOCK if scheme == "two_block" else MULTI_BLOCK
        if flow_order is None:
            self.order = metric.order
        else:
            order = np.asarray(flow_order, dtype=np.int64)
            if sorted(order.tolist()) != list(range(metric.blocks.n_blocks)):
                raise ContractViolation(f"flow order {order.tolist()} is not a permutation")
            self.order = order

    def kernel_args(self):
        m = self.metric
        return (self.model.kernel_id, self.model.data, m.fidx, m.nterm,
                self.phi, m.bptr, m.bidx, self.order)

    def step(self, state: PhasePoint, eps: float, n_steps: int = 1) -> PhasePoint:
        theta = state.theta.copy()
        p = state.p.copy()
        gU = self.model.grad_potential(theta)
        mid, data, fidx, nterm, phi, bptr, bidx, order = self.kernel_args()
        run_steps(self.kind, n_steps, theta, p, gU, float(eps), mid, data, fidx,
                  nterm, phi, bptr, bidx, order)
        self.model.n_grad += n_steps
        return PhasePoint(theta, p)

    def hamiltonian(self, state: PhasePoint) -> float:
        logm = self.metric.log_mass(state.theta, self.phi)
        return float(hamiltonian_kernel(self.model.potential(state.theta), state.p, logm))


def xi_terms(theta, p_b, model: TargetModel, metric: MetricModel, phi):
    """Effective forces ``(Xi_A, Xi_B)`` of the two-block scheme."""
    theta = np.ascontiguousarray(theta, float)
    ia = metric.bidx[metric.bptr[0]:metric.bptr[1]]
    ib = metric.bidx[metric.bptr[1]:metric.bptr[2]]
    gU = model.grad_potential(theta)
    logm = np.zeros(metric.dim)
    gw = np.zeros((metric.dim, 2))
    eval_all(theta, metric.fidx, metric.nterm, np.ascontiguousarray(phi, float), logm, gw)
    xa = _xi_a(ia, ib, np.ascontiguousarray(p_b, float), gU, metric.fidx,
               metric.nterm, np.ascontiguousarray(phi, float), logm, gw, metric.dim)
    return xa[ia], -gU[ib]


def block_flow(k: int, h: float, state: PhasePoint, metric: MetricModel, phi) -> PhasePoint:
    """Exact flow of ``H_k`` for time ``h``."""
    theta = state.theta.copy()
    p = state.p.copy()
    logm = np.zeros(metric.dim)
    gw = np.zeros((metric.dim, 2))
    _block_flow(int(k), float(h), theta, p, metric.fidx, metric.nterm,
                np.ascontiguousarray(phi, float), metric.bptr, metric.bidx, logm, gw)
    return PhasePoint(theta, p)


def leapfrog_two_block(state: PhasePoint, eps: float, model, metric, phi) -> PhasePoint:
    return Integrator(model, metric, phi, "two_block").step(state, eps)


def leapfrog_multi_block(state: PhasePoint, eps: float, model, metric, phi,
                         flow_order=None) -> PhasePoint:
    return Integrator(model, metric, phi, "multi_block", flow_order).step(state, eps)


def split_hamiltonian(model: TargetModel, metric: MetricModel, theta, p, phi):
    """Return ``(H0, [H_1, ..., H_K])``."""
    lm = metric.log_mass(theta, phi)
    p = np.asarray(p, dtype=float)
    h0 = model.potential(theta) + 0.5 * float(np.sum(lm))
    hk = [0.5 * float(np.sum(p[list(b)] ** 2 * np.exp(-lm[list(b)])))
          for b in metric.blocks.blocks]
    return h0, hk
