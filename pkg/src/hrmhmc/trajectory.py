"""Dynamic trajectories: multiplicative doubling, stopping rules and replay.

A trajectory is grown by doubling in a random direction. After every
doubling the stopping cascade runs (local divergence, sub-tree U-turns,
global divergence, global U-turn or depth cap), and the next state is drawn
from the retained states by level-wise biased replay of the doublings.

The full transition runs inside one numba kernel that writes states into a
preallocated :class:`Workspace`; the pieces are also exposed on plain arrays
so they can be tested in isolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .integrator import Integrator, PhasePoint, integrator_step
from .metric import eval_all, hamiltonian_kernel
from .model import ContractViolation

__all__ = [
    "UTURN",
    "DIVERGENCE",
    "MAX_DEPTH",
    "Trajectory",
    "TransitionStats",
    "Workspace",
    "expand",
    "check_uturn",
    "check_uturn_generalized",
    "check_stopping",
    "replay_weights",
    "replay_select",
    "nuts_transition",
    "transition_kernel",
    "static_transition",
]

UTURN, DIVERGENCE, MAX_DEPTH, NOT_EXPANDED = 0, 1, 2, 3
STOP_REASONS = {UTURN: "uturn", DIVERGENCE: "divergence", MAX_DEPTH: "max_depth",
                NOT_EXPANDED: "max_depth"}


# ----------------------------------------------------------------------------
# kernels on plain arrays


@nb.njit(cache=True, error_model="numpy")
def uturn_kernel(q_start, q_end, p_start, p_end):
    a = 0.0
    b = 0.0
    for i in range(q_start.shape[0]):
        dq = q_end[i] - q_start[i]
        a += dq * p_end[i]
        b += dq * p_start[i]
    return a < 0.0 or b < 0.0


@nb.njit(cache=True, error_model="numpy")
def uturn_generalized_kernel(V, lo, hi, p_start, p_end):
    # rho = sum of M^-1 p over rows lo..hi of V
    n = V.shape[1]
    a = 0.0
    b = 0.0
    for i in range(n):
        r = 0.0
        for t in range(lo, hi + 1):
            r += V[t, i]
        a += r * p_end[i]
        b += r * p_start[i]
    return a < 0.0 or b < 0.0


@nb.njit(cache=True, error_model="numpy")
def _segment_uturn(TH, P, V, lo, hi, generalized):
    if generalized:
        return uturn_generalized_kernel(V, lo, hi, P[lo], P[hi])
    return uturn_kernel(TH[lo], TH[hi], P[lo], P[hi])


@nb.njit(cache=True, error_model="numpy")
def _spread(H, lo, hi):
    mx = -np.inf
    mn = np.inf
    for t in range(lo, hi + 1):
        h = H[t]
        if not np.isfinite(h):
            return np.inf
        mx = max(mx, h)
        mn = min(mn, h)
    return mx - mn


@nb.njit(cache=True, error_model="numpy")
def check_stopping_kernel(TH, P, V, H, lo, hi, new_lo, new_hi, j, max_depth,
                          delta_max, generalized):
    """Stopping cascade for a trajectory ``lo..hi`` of length ``2**j`` whose
    newest half is ``new_lo..new_hi``. Returns ``(stop, discard, divergent)``."""
    if _spread(H, new_lo, new_hi) > delta_max:
        return True, True, True
    seg = new_hi - new_lo + 1
    size = 2
    while size <= seg and size <= (1 << (j - 1)):
        for s in range(new_lo, new_hi + 1, size):
            if _segment_uturn(TH, P, V, s, s + size - 1, generalized):
                return True, True, False
        size *= 2
    if _spread(H, lo, hi) > delta_max:
        return True, False, True
    stop = _segment_uturn(TH, P, V, lo, hi, generalized)
    if j >= max_depth:
        stop = True
    return stop, False, False


@nb.njit(cache=True, error_model="numpy")
def replay_weights_kernel(H, dirs, D, alpha, cfac, w_old, w_new, s_before, s_after):
    """Biased replay weights for energies ``H`` (length ``2**D``).

    ``dirs[l-1]`` is the direction of doubling ``l``. Per-level quantities are
    written to the ledger arrays at index ``l-1``.
    """
    L = H.shape[0]
    w = np.zeros(L)
    hmin = np.inf
    for t in range(L):
        if np.isfinite(H[t]) and H[t] < hmin:
            hmin = H[t]
    if hmin == np.inf:
        return w
    for t in range(L):
        if np.isfinite(H[t]):
            w[t] = math.exp(-(H[t] - hmin))
    o = 0
    for lev in range(D, 0, -1):
        half = 1 << (lev - 1)
        v = dirs[lev - 1]
        if v > 0:
            old_lo, new_lo = o, o + half
        else:
            old_lo, new_lo = o + half, o
        wo = 0.0
        wn = 0.0
        for t in range(half):
            wo += w[old_lo + t]
            wn += w[new_lo + t]
        if wo == 0.0:
            a = 1.0
        else:
            a = min(1.0, wn / wo)
        S = wo + wn
        denom = (1.0 - a) * wo + a * wn
        c = S / denom if denom > 0.0 else 0.0
        for t in range(half):
            w[old_lo + t] *= c * (1.0 - a)
            w[new_lo + t] *= c * a
        after = 0.0
        for t in range(2 * half):
            after += w[o + t]
        alpha[lev - 1] = a
        cfac[lev - 1] = c
        w_old[lev - 1] = wo
        w_new[lev - 1] = wn
        s_before[lev - 1] = S
        s_after[lev - 1] = after
        if v < 0:
            o += half
    return w


@nb.njit(cache=True, error_model="numpy")
def select_kernel(w, u, fallback):
    total = 0.0
    for t in range(w.shape[0]):
        total += w[t]
    if not total > 0.0:
        return fallback
    target = u * total
    acc = 0.0
    last = fallback
    for t in range(w.shape[0]):
        if w[t] > 0.0:
            last = t
            acc += w[t]
            if acc > target:
                return t
    return last


@nb.njit(cache=True, error_model="numpy")
def _accept_stat(H, lo, hi, H0):
    s = 0.0
    for t in range(lo, hi + 1):
        d = H0 - H[t]
        if np.isfinite(d):
            s += math.exp(min(d, 0.0))
    return s / (hi - lo + 1)


@nb.njit(cache=True, error_model="numpy")
def transition_kernel(theta0, U0, g0, z, dirs, u, eps, kind, mid, data, fidx, nterm,
                      phi, bptr, bidx, order, max_depth, delta_max, generalized,
                      TH, P, G, UU, HH, V, out_theta, out_g, out_info):
    """One dynamic-trajectory transition from ``theta0``.

    ``z`` are standard normals for the momentum, ``dirs`` the doubling
    directions per level and ``u`` a uniform for the final draw. Returns
    ``(U_selected, accept_stat)``; ``out_info`` receives
    ``(depth, n_grad, divergent, reason, selected_offset, energy_error)``.
    """
    n = theta0.shape[0]
    logm = np.zeros(n)
    gw = np.zeros((n, 2))
    eval_all(theta0, fidx, nterm, phi, logm, gw)
    c = (1 << max_depth) - 1
    p0 = np.empty(n)
    for i in range(n):
        p0[i] = math.exp(0.5 * logm[i]) * z[i]
        V[c, i] = p0[i] * math.exp(-logm[i])
    TH[c] = theta0
    P[c] = p0
    G[c] = g0
    UU[c] = U0
    H0 = hamiltonian_kernel(U0, p0, logm)
    HH[c] = H0
    left = c
    right = c
    j = 0
    ngrad = 0
    divergent = False
    reason = 3
    hhat = np.nan
    used = np.zeros(max(max_depth, 1), dtype=np.int64)
    th = np.empty(n)
    p = np.empty(n)
    g = np.empty(n)
    for level in range(max_depth):
        v = dirs[level]
        L = 1 << j
        if v > 0:
            th[:] = TH[right]
            p[:] = P[right]
            g[:] = G[right]
        else:
            th[:] = TH[left]
            for i in range(n):
                p[i] = -P[left, i]
            g[:] = G[left]
        for s in range(L):
            U = integrator_step(kind, th, p, g, eps, mid, data, fidx, nterm, phi,
                                bptr, bidx, order, logm, gw)
            t = right + 1 + s if v > 0 else left - 1 - s
            sign = 1.0 if v > 0 else -1.0
            TH[t] = th
            G[t] = g
            UU[t] = U
            HH[t] = hamiltonian_kernel(U, p, logm)
            for i in range(n):
                P[t, i] = sign * p[i]
                V[t, i] = sign * p[i] * math.exp(-logm[i])
        ngrad += L
        if v > 0:
            new_lo, new_hi = right + 1, right + L
            lo, hi = left, new_hi
        else:
            new_lo, new_hi = left - L, left - 1
            lo, hi = new_lo, right
        stop, discard, div = check_stopping_kernel(
            TH, P, V, HH, lo, hi, new_lo, new_hi, j + 1, max_depth, delta_max,
            generalized)
        if div:
            divergent = True
        if discard:
            # the rejected segment still measures the step size
            hhat = _accept_stat(HH, new_lo, new_hi, H0)
            reason = 1 if div else 0
            break
        left, right = lo, hi
        used[j] = v
        j += 1
        hhat = _accept_stat(HH, new_lo, new_hi, H0)
        if stop:
            if div:
                reason = 1
            elif j >= max_depth and not _segment_uturn(TH, P, V, lo, hi, generalized):
                reason = 2
            else:
                reason = 0
            break

    D = j
    Lt = right - left + 1
    ledger = np.zeros(max(D, 1))
    w = replay_weights_kernel(HH[left:right + 1], used, D, ledger.copy(),
                              ledger.copy(), ledger.copy(), ledger.copy(),
                              ledger.copy(), ledger.copy())
    init = c - left
    sel = select_kernel(w, u, init) if Lt > 1 else init
    t = left + sel
    out_theta[:] = TH[t]
    out_g[:] = G[t]
    out_info[0] = D
    out_info[1] = ngrad
    out_info[2] = 1.0 if divergent else 0.0
    out_info[3] = reason
    out_info[4] = sel - init
    out_info[5] = HH[t] - H0
    return UU[t], hhat


# ----------------------------------------------------------------------------
# Python API


@dataclass
class Trajectory:
    """Ordered states of one trajectory with their energies."""

    theta: np.ndarray
    p: np.ndarray
    energies: np.ndarray
    initial_index: int = 0
    directions: list[int] = field(default_factory=list)
    divergent: bool = False
    stopped_reason: str | None = None

    @classmethod
    def start(cls, state: PhasePoint, energy: float) -> "Trajectory":
        return cls(state.theta[None, :].copy(), state.p[None, :].copy(),
                   np.array([float(energy)]))

    def __len__(self) -> int:
        return self.energies.shape[0]

    @property
    def depth(self) -> int:
        return len(self.directions)

    def state(self, t: int) -> PhasePoint:
        return PhasePoint(self.theta[t], self.p[t])


def expand(traj: Trajectory, eps: float, integrator: Integrator,
           rng: np.random.Generator, direction: int | None = None):
    """Double ``traj`` in a random (or given) direction.

    Returns the new trajectory and the index bounds ``(lo, hi)`` of the new
    segment within it.
    """
    L = len(traj)
    if L & (L - 1):
        raise ContractViolation("trajectory length must be a power of two")
    v = direction if direction is not None else (1 if rng.random() < 0.5 else -1)
    if v not in (1, -1):
        raise ContractViolation("direction must be +1 or -1")
    z = traj.state(L - 1) if v > 0 else traj.state(0).flip()
    th, ps, hs = [], [], []
    for _ in range(L):
        z = integrator.step(z, eps)
        stored = z if v > 0 else z.flip()
        th.append(stored.theta)
        ps.append(stored.p)
        hs.append(integrator.hamiltonian(z))
    new_th, new_p, new_h = np.array(th), np.array(ps), np.array(hs)
    if v > 0:
        out = Trajectory(np.vstack([traj.theta, new_th]), np.vstack([traj.p, new_p]),
                         np.concatenate([traj.energies, new_h]), traj.initial_index,
                         traj.directions + [v])
        bounds = (L, 2 * L - 1)
    else:
        out = Trajectory(np.vstack([new_th[::-1], traj.theta]),
                         np.vstack([new_p[::-1], traj.p]),
                         np.concatenate([new_h[::-1], traj.energies]),
                         traj.initial_index + L, traj.directions + [v])
        bounds = (0, L - 1)
    return out, bounds


def check_uturn(q_start, q_end, p_start, p_end) -> bool:
    """Euclidean U-turn test on the endpoint displacement."""
    f = lambda a: np.ascontiguousarray(a, dtype=float)
    return bool(uturn_kernel(f(q_start), f(q_end), f(p_start), f(p_end)))


def check_uturn_generalized(velocities, p_start, p_end) -> bool:
    """U-turn test on ``rho = sum_t M(q_t)^-1 p_t`` over the segment."""
    V = np.ascontiguousarray(np.atleast_2d(velocities), dtype=float)
    return bool(uturn_generalized_kernel(V, 0, V.shape[0] - 1,
                                         np.ascontiguousarray(p_start, float),
                                         np.ascontiguousarray(p_end, float)))


def _velocities(traj: Trajectory, integrator: Integrator | None) -> np.ndarray:
    if integrator is None:
        return np.zeros_like(traj.p)
    phi = integrator.phi
    return np.array([traj.p[t] * np.exp(-integrator.metric.log_mass(traj.theta[t], phi))
                     for t in range(len(traj))])


def check_stopping(traj: Trajectory, new_segment: tuple[int, int], delta_max: float = 1000.0,
                   max_depth: int = 10, generalized: bool = False,
                   integrator: Integrator | None = None) -> tuple[bool, bool, bool]:
    """Stopping cascade; returns ``(stop, discard, divergent)``."""
    L = len(traj)
    lo, hi = new_segment
    if L < 2 or L & (L - 1) or hi - lo + 1 != L // 2:
        raise ContractViolation("new segment must be the newest half of the trajectory")
    j = L.bit_length() - 1
    V = _velocities(traj, integrator) if generalized else np.zeros_like(traj.p)
    res = check_stopping_kernel(np.ascontiguousarray(traj.theta, float),
                                np.ascontiguousarray(traj.p, float), V,
                                np.ascontiguousarray(traj.energies, float),
                                0, L - 1, lo, hi, j, max_depth, float(delta_max),
                                generalized)
    return tuple(bool(x) for x in res)


@dataclass(frozen=True)
class ReplayLedger:
    """Per-level replay quantities; index ``l-1`` holds level ``l``."""

    weights: np.ndarray
    alpha: np.ndarray
    c: np.ndarray
    w_old: np.ndarray
    w_new: np.ndarray
    block_sum_before: np.ndarray
    block_sum_after: np.ndarray


def replay_weights(energies, directions) -> ReplayLedger:
    H = np.ascontiguousarray(energies, dtype=float)
    D = len(directions)
    if H.shape[0] != 1 << D:
        raise ContractViolation("trajectory length must be 2**len(directions)")
    dirs = np.asarray(directions, dtype=np.int64) if D else np.zeros(1, np.int64)
    arrs = [np.zeros(max(D, 1)) for _ in range(6)]
    w = replay_weights_kernel(H, dirs, D, *arrs)
    return ReplayLedger(w, *(a[:D] for a in arrs))


def replay_select(traj: Trajectory, rng: np.random.Generator) -> int:
    """Draw the index of the next state from ``traj``."""
    w = replay_weights(traj.energies, traj.directions).weights
    return int(select_kernel(w, rng.random(), traj.initial_index))


@dataclass(frozen=True)
class TransitionStats:
    depth: int
    n_grad: int
    divergent: bool
    accept_stat: float
    stopped_reason: str
    energy_error: float
    offset: int


class Workspace:
    """Preallocated trajectory buffers for one chain."""

    def __init__(self, dim: int, max_depth: int):
        size = 1 << (max_depth + 1)
        self.max_depth = max_depth
        self.TH = np.zeros((size, dim))
        self.P = np.zeros((size, dim))
        self.G = np.zeros((size, dim))
        self.V = np.zeros((size, dim))
        self.U = np.zeros(size)
        self.H = np.zeros(size)
        self.out_theta = np.zeros(dim)
        self.out_g = np.zeros(dim)
        self.info = np.zeros(6)


def draw_transition_randomness(rng: np.random.Generator, dim: int, max_depth: int):
    z = rng.standard_normal(dim)
    dirs = np.where(rng.random(max(max_depth, 1)) < 0.5, 1, -1).astype(np.int64)
    return z, dirs, rng.random()


def nuts_transition(theta, eps: float, integrator: Integrator, rng: np.random.Generator,
                    max_depth: int = 10, delta_max: float = 1000.0,
                    uturn: str = "euclidean", workspace: Workspace | None = None,
                    potential_and_grad=None):
    """Advance ``theta`` by one dynamic-trajectory transition.

    Returns ``(theta_next, U_next, grad_next, stats)``. ``potential_and_grad``
    may pass the known ``(U, grad U)`` at ``theta`` to avoid re-evaluating it.
    """
    if uturn not in ("euclidean", "generalized"):
        raise ContractViolation(f"unknown U-turn rule {uturn!r}")
    if max_depth < 0:
        raise ContractViolation("max_depth must be non-negative")
    model = integrator.model
    theta = np.ascontiguousarray(theta, dtype=float)
    if potential_and_grad is None:
        U0, g0 = model.potential_and_grad(theta)
    else:
        U0, g0 = potential_and_grad
    ws = workspace if workspace is not None else Workspace(model.dim, max_depth)
    if ws.max_depth != max_depth:
        raise ContractViolation("workspace was built for a different max_depth")
    z, dirs, u = draw_transition_randomness(rng, model.dim, max_depth)
    mid, data, fidx, nterm, phi, bptr, bidx, order = integrator.kernel_args()
    U, hhat = transition_kernel(theta, float(U0), np.ascontiguousarray(g0, float), z, dirs,
                                u, float(eps), integrator.kind, mid, data, fidx, nterm,
                                phi, bptr, bidx, order, max_depth, float(delta_max),
                                uturn == "generalized", ws.TH, ws.P, ws.G, ws.U, ws.H,
                                ws.V, ws.out_theta, ws.out_g, ws.info)
    info = ws.info
    model.n_grad += int(info[1])
    stats = TransitionStats(int(info[0]), int(info[1]), bool(info[2]), float(hhat),
                            STOP_REASONS[int(info[3])], float(info[5]), int(info[4]))
    return ws.out_theta.copy(), float(U), ws.out_g.copy(), stats


@nb.njit(cache=True, error_model="numpy")
def static_transition_kernel(theta0, U0, g0, z, u, eps, n_steps, kind, mid, data, fidx,
                             nterm, phi, bptr, bidx, order, delta_max, out_theta, out_g,
                             out_info):
    """Fixed-length HMC transition with a Metropolis correction."""
    n = theta0.shape[0]
    logm = np.zeros(n)
    gw = np.zeros((n, 2))
    eval_all(theta0, fidx, nterm, phi, logm, gw)
    p = np.empty(n)
    for i in range(n):
        p[i] = math.exp(0.5 * logm[i]) * z[i]
    H0 = hamiltonian_kernel(U0, p, logm)
    th = theta0.copy()
    g = g0.copy()
    U = U0
    for _ in range(n_steps):
        U = integrator_step(kind, th, p, g, eps, mid, data, fidx, nterm, phi,
                            bptr, bidx, order, logm, gw)
    H1 = hamiltonian_kernel(U, p, logm)
    dH = H1 - H0
    acc = math.exp(min(0.0, -dH)) if np.isfinite(dH) else 0.0
    divergent = not np.isfinite(dH) or abs(dH) > delta_max
    out_info[0] = 0
    out_info[1] = n_steps
    out_info[2] = 1.0 if divergent else 0.0
    out_info[3] = 1 if divergent else 2
    if u < acc:
        out_theta[:] = th
        out_g[:] = g
        out_info[4] = 1
        out_info[5] = dH
        return U, acc
    out_theta[:] = theta0
    out_g[:] = g0
    out_info[4] = 0
    out_info[5] = 0.0
    return U0, acc


def static_transition(theta, eps: float, n_steps: int, integrator: Integrator,
                      rng: np.random.Generator, delta_max: float = 1000.0,
                      workspace: Workspace | None = None, potential_and_grad=None):
    """Fixed-length HMC step; same return convention as :func:`nuts_transition`."""
    if n_steps < 1:
        raise ContractViolation("n_steps must be at least 1")
    model = integrator.model
    theta = np.ascontiguousarray(theta, dtype=float)
    U0, g0 = (model.potential_and_grad(theta) if potential_and_grad is None
              else potential_and_grad)
    ws = workspace if workspace is not None else Workspace(model.dim, 0)
    z = rng.standard_normal(model.dim)
    u = rng.random()
    mid, data, fidx, nterm, phi, bptr, bidx, order = integrator.kernel_args()
    U, acc = static_transition_kernel(theta, float(U0), np.ascontiguousarray(g0, float), z,
                                      u, float(eps), int(n_steps), integrator.kind, mid,
                                      data, fidx, nterm, phi, bptr, bidx, order,
                                      float(delta_max), ws.out_theta, ws.out_g, ws.info)
    info = ws.info
    model.n_grad += n_steps
    stats = TransitionStats(0, n_steps, bool(info[2]), float(acc),
                            "divergence" if info[2] else "max_depth", float(info[5]),
                            int(info[4]))
    return ws.out_theta.copy(), float(U), ws.out_g.copy(), stats
