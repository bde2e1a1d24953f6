"""Target distributions, block structures and datasets.

Every target is a potential ``U(theta) = -log pi_u(theta)`` on unconstrained
coordinates, with a hand-derived gradient. Additive constants are dropped.
The numerical work lives in ``numba`` kernels with the common signature
``kernel(theta, data) -> (U, grad)`` where ``data = (A, b, c)`` packs a 2-D
float array, a 1-D float array and a 1-D array of scalar hyperparameters.
The integrator and trajectory kernels reach them through
``potential_kernel(model_id, theta, data)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np
from scipy import stats

__all__ = [
    "BlockStructure",
    "Dataset",
    "TargetModel",
    "Funnel",
    "Gaussian",
    "Horseshoe",
    "StochasticVolatility",
    "NegativeBinomial",
    "ContractViolation",
    "digamma",
    "generate_synthetic",
    "ingest_returns",
    "funnel_energy_budget",
]


class ContractViolation(ValueError):
    """Raised when an operation is called outside its documented domain."""


# ----------------------------------------------------------------------------
# special functions


@nb.njit(cache=True, error_model="numpy")
def digamma(x):
    """Digamma function for ``x > 0``.

    Upward recurrence to ``x >= 10`` followed by the asymptotic series.
    """
    r = 0.0
    while x < 10.0:
        r -= 1.0 / x
        x += 1.0
    f = 1.0 / (x * x)
    t = f * (-1.0 / 12 + f * (1.0 / 120 + f * (-1.0 / 252 + f * (
        1.0 / 240 + f * (-1.0 / 132 + f * (691.0 / 32760 + f * (-1.0 / 12)))))))
    return r + math.log(x) - 0.5 / x + t


@nb.njit(cache=True, error_model="numpy")
def _softplus(x):
    if x > 0.0:
        return x + math.log1p(math.exp(-x))
    return math.log1p(math.exp(x))


@nb.njit(cache=True, error_model="numpy")
def _sigmoid(x):
    if x >= 0.0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


@nb.njit(cache=True, error_model="numpy")
def _logaddexp(a, b):
    if a > b:
        return a + math.log1p(math.exp(b - a))
    return b + math.log1p(math.exp(a - b))


# ----------------------------------------------------------------------------
# potential kernels


@nb.njit(cache=True, error_model="numpy")
def gaussian_kernel(theta, data):
    prec = data[1]
    g = prec * theta
    return 0.5 * np.dot(theta, g), g


@nb.njit(cache=True, error_model="numpy")
def funnel_kernel(theta, data):
    v = theta[0]
    d = theta.shape[0] - 1
    ev = math.exp(-v)
    g = np.empty_like(theta)
    sx = 0.0
    for i in range(1, d + 1):
        sx += theta[i] * theta[i]
        g[i] = ev * theta[i]
    U = 0.5 * ev * sx + 0.5 * d * v + v * v / 18.0
    g[0] = -0.5 * ev * sx + 0.5 * d + v / 9.0
    return U, g


@nb.njit(cache=True, error_model="numpy")
def horseshoe_kernel(theta, data):
    X = data[0]
    y = data[1]
    tau2 = data[2][0] * data[2][0]
    s02 = data[2][1] * data[2][1]
    n, p = X.shape
    b0 = theta[0]
    beta = theta[1:1 + p]
    eta = X @ beta
    r = np.empty(n)
    ll = 0.0
    for i in range(n):
        e = eta[i] + b0
        ll += y[i] * e - _softplus(e)
        r[i] = y[i] - _sigmoid(e)
    g = np.empty_like(theta)
    g[1:1 + p] = -(X.T @ r)
    U = -ll + 0.5 * b0 * b0 / s02
    g[0] = -np.sum(r) + b0 / s02
    for j in range(p):
        lam = theta[1 + p + j]
        a = math.exp(-2.0 * lam) / tau2
        bj = beta[j]
        U += 0.5 * bj * bj * a + _softplus(2.0 * lam)
        g[1 + j] += bj * a
        g[1 + p + j] = -bj * bj * a + 2.0 * _sigmoid(2.0 * lam)
    return U, g


@nb.njit(cache=True, error_model="numpy")
def sv_kernel(theta, data):
    y = data[1]
    c = data[2]
    k_mu, k_sd, phi_var, ig_a, ig_b = c[0], c[1], c[2], c[3], c[4]
    T = y.shape[0]
    ps = theta[0]
    lk = theta[1]
    s = theta[2]
    x = theta[3:]
    phi = math.tanh(0.5 * ps)
    es = math.exp(-s)
    e2k = math.exp(-2.0 * lk)
    omp = 1.0 - phi * phi
    # log(1 - phi^2) in a form that stays finite for large |phi*|
    log_omp = math.log(4.0) - 2.0 * _logaddexp(0.5 * ps, -0.5 * ps)

    g = np.zeros_like(theta)
    zk = (lk - k_mu) / k_sd
    U = 0.5 * zk * zk + 0.5 * ps * ps / phi_var + ig_a * s + ig_b * es
    g[1] = zk / k_sd
    g[0] = ps / phi_var
    g[2] = ig_a - ig_b * es

    # x_0 | phi, sigma^2
    U += 0.5 * s - 0.5 * log_omp + 0.5 * x[0] * x[0] * omp * es
    g[2] += 0.5 - 0.5 * x[0] * x[0] * omp * es
    dphi = -x[0] * x[0] * phi * es
    g[3] += x[0] * omp * es
    g[0] += 0.5 * phi

    ssq = 0.0
    obs = 0.0
    for t in range(1, T + 1):
        r = x[t] - phi * x[t - 1]
        ssq += r * r
        dphi -= r * x[t - 1] * es
        g[3 + t] += r * es
        g[3 + t - 1] -= phi * r * es
        q = y[t - 1] * y[t - 1] * math.exp(-x[t]) * e2k
        obs += q
        U += lk + 0.5 * x[t] + 0.5 * q
        g[3 + t] += 0.5 - 0.5 * q
    U += 0.5 * T * s + 0.5 * ssq * es
    g[2] += 0.5 * T - 0.5 * ssq * es
    g[1] += T - obs
    g[0] += 0.5 * omp * dphi
    return U, g


@nb.njit(cache=True, error_model="numpy")
def negbin_kernel(theta, data):
    Y = data[0]
    c = data[2]
    nu_a, nu_b, mu_sd, eta_sd = c[0], c[1], c[2], c[3]
    G, J = Y.shape
    mu = theta[0]
    lnu = theta[1]
    nu = math.exp(lnu)
    mu_v = mu_sd * mu_sd
    eta_v = eta_sd * eta_sd
    g = np.empty_like(theta)
    U = nu_a * lnu + nu_b * math.exp(-lnu) + 0.5 * mu * mu / mu_v
    g[0] = mu / mu_v
    g[1] = nu_a - nu_b * math.exp(-lnu)
    lg_nu = math.lgamma(nu)
    dg_nu = digamma(nu)
    dnu = 0.0
    for i in range(G):
        eta = theta[2 + i]
        r = eta - mu
        U += 0.5 * r * r / eta_v
        g[0] -= r / eta_v
        gi = r / eta_v
        lse = _logaddexp(lnu, eta)
        sig = _sigmoid(eta - lnu)
        inv = math.exp(-lse)
        for j in range(J):
            yij = Y[i, j]
            # log y! is subtracted so the sum stays O(1) per count
            U -= (math.lgamma(yij + nu) - math.lgamma(yij + 1.0) - lg_nu
                  - yij * _softplus(lnu - eta) - nu * _softplus(eta - lnu))
            gi -= yij - (yij + nu) * sig
            dnu += digamma(yij + nu) - dg_nu + lnu + 1.0 - lse - (yij + nu) * inv
        g[2 + i] = gi
    g[1] -= nu * dnu
    return U, g


GAUSSIAN_ID, FUNNEL_ID, HORSESHOE_ID, SV_ID, NEGBIN_ID = range(5)


@nb.njit(cache=True, error_model="numpy")
def potential_kernel(model_id, theta, data):
    """Dispatch to the potential kernel of ``model_id``.

    Integer dispatch keeps every kernel that calls a potential cacheable.
    """
    if model_id == FUNNEL_ID:
        return funnel_kernel(theta, data)
    if model_id == HORSESHOE_ID:
        return horseshoe_kernel(theta, data)
    if model_id == SV_ID:
        return sv_kernel(theta, data)
    if model_id == NEGBIN_ID:
        return negbin_kernel(theta, data)
    return gaussian_kernel(theta, data)


# ----------------------------------------------------------------------------
# block structure and datasets


@dataclass(frozen=True)
class BlockStructure:
    """Ordered partition of the coordinates into blocks.

    ``flow_order`` is a zero-based permutation of the block indices giving the
    order of the block flows in the multi-block integrator.
    """

    blocks: tuple[tuple[int, ...], ...]
    flow_order: tuple[int, ...] = ()

    def __post_init__(self):
        blocks = tuple(tuple(int(i) for i in b) for b in self.blocks)
        object.__setattr__(self, "blocks", blocks)
        order = tuple(self.flow_order) or tuple(range(len(blocks)))
        object.__setattr__(self, "flow_order", tuple(int(k) for k in order))
        if any(len(b) == 0 for b in blocks):
            raise ContractViolation("empty block")
        flat = [i for b in blocks for i in b]
        if sorted(flat) != list(range(len(flat))):
            raise ContractViolation(
                "blocks must be disjoint and cover 0..dim-1")
        if sorted(self.flow_order) != list(range(len(blocks))):
            raise ContractViolation(
                f"flow_order {self.flow_order} is not a permutation of the "
                f"{len(blocks)} block indices")

    @property
    def dim(self) -> int:
        return sum(len(b) for b in self.blocks)

    @property
    def n_blocks(self) -> int:
        return len(self.blocks)

    def block_of(self) -> np.ndarray:
        out = np.empty(self.dim, dtype=np.int64)
        for k, b in enumerate(self.blocks):
            out[list(b)] = k
        return out

    def with_order(self, flow_order: Sequence[int]) -> "BlockStructure":
        return BlockStructure(self.blocks, tuple(flow_order))

    @classmethod
    def single(cls, dim: int) -> "BlockStructure":
        return cls((tuple(range(dim)),))


@dataclass(frozen=True)
class Dataset:
    """Named arrays backing one model. Arrays are made read-only."""

    model: str
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        for a in self.arrays.values():
            a.setflags(write=False)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.arrays[key]

    def to_csv(self, path: str | Path) -> None:
        """Write the dataset as CSV with a header row naming the columns."""
        header, columns = [], []
        for name, a in self.arrays.items():
            a = np.asarray(a)
            if a.ndim == 1:
                header.append(name)
                columns.append(a)
            else:
                for j in range(a.shape[1]):
                    header.append(f"{name}{j + 1}")
                    columns.append(a[:, j])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            if columns:
                for row in zip(*columns):
                    w.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                                else int(v) for v in row])


# ----------------------------------------------------------------------------
# models


class TargetModel:
    """A potential with analytic gradient on unconstrained coordinates.

    Subclasses set ``name``, ``blocks``, ``data``, ``hyperparameters``,
    ``param_names`` and the compiled ``kernel``. ``n_grad`` counts gradient
    evaluations made through this instance; every chain owns its own
    instance, so the tally needs no locking.
    """

    name: str = "target"
    kernel_id: int = GAUSSIAN_ID

    def __init__(self, blocks: BlockStructure, data, hyperparameters: dict,
                 param_names: list[str], dataset: Dataset | None = None):
        self.blocks = blocks
        self.data = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in data)
        self.hyperparameters = dict(hyperparameters)
        self.param_names = list(param_names)
        self.dataset = dataset
        self.n_grad = 0
        if len(self.param_names) != self.dim:
            raise ContractViolation("param_names length must equal dim")

    @property
    def dim(self) -> int:
        return self.blocks.dim

    def _check(self, theta) -> np.ndarray:
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ContractViolation(
                f"{self.name}: expected a vector of length {self.dim}, "
                f"got shape {theta.shape}")
        return theta

    def potential(self, theta) -> float:
        return float(potential_kernel(self.kernel_id, self._check(theta), self.data)[0])

    def grad_potential(self, theta) -> np.ndarray:
        self.n_grad += 1
        return potential_kernel(self.kernel_id, self._check(theta), self.data)[1]

    def potential_and_grad(self, theta) -> tuple[float, np.ndarray]:
        self.n_grad += 1
        U, g = potential_kernel(self.kernel_id, self._check(theta), self.data)
        return float(U), g

    def fresh(self) -> "TargetModel":
        """Copy sharing the (read-only) data with a zeroed gradient counter."""
        other = object.__new__(type(self))
        other.__dict__.update(self.__dict__)
        other.n_grad = 0
        return other

    def initial_point(self, rng: np.random.Generator, variance: float = 0.1):
        return math.sqrt(variance) * rng.standard_normal(self.dim)

    def report_quantities(self, samples: np.ndarray) -> list[tuple[str, np.ndarray]]:
        """Quantities tabulated by ``diagnostics.summarize``.

        Each entry is ``(label, values)`` with ``values`` of shape ``(N, m)``;
        groups with ``m > 1`` are reported as the minimum over the group.
        """
        return [("theta", samples)]


class Gaussian(TargetModel):
    """Independent Gaussian target ``U = 0.5 * sum(theta**2 / var)``."""

    name = "gaussian"
    kernel_id = GAUSSIAN_ID

    def __init__(self, dim: int = 10, variances: Sequence[float] | None = None,
                 blocks: BlockStructure | None = None):
        var = np.ones(dim) if variances is None else np.asarray(variances, float)
        super().__init__(blocks or BlockStructure.single(dim),
                         (np.zeros((1, 1)), 1.0 / var, np.zeros(1)),
                         {"dim": dim}, [f"theta[{i + 1}]" for i in range(dim)])

    def report_quantities(self, samples):
        return [("theta[1]", samples[:, :1]), ("theta", samples)]


class Funnel(TargetModel):
    """Neal's funnel: ``v ~ N(0, 3^2)``, ``x | v ~ N(0, exp(v) I_d)``.

    Coordinates ``(v, x_1..x_d)``; blocks ``A = {v}``, ``B = x``.
    """

    name = "funnel"
    kernel_id = FUNNEL_ID

    def __init__(self, d: int = 20):
        if d < 1:
            raise ContractViolation("funnel dimension must be >= 1")
        blocks = BlockStructure(((0,), tuple(range(1, d + 1))))
        super().__init__(blocks, (np.zeros((1, 1)), np.zeros(1), np.zeros(1)),
                         {"d": d}, ["v"] + [f"x[{i}]" for i in range(1, d + 1)])

    def report_quantities(self, samples):
        return [("v", samples[:, :1]), ("x", samples[:, 1:])]


class Horseshoe(TargetModel):
    """Sparse logistic regression with a horseshoe prior.

    Coordinates ``(beta0, beta_1..beta_p, log lambda_1..log lambda_p)``.
    Blocks: ``A = (beta0, log lambda)``, ``B = beta``.
    """

    name = "horseshoe"
    kernel_id = HORSESHOE_ID

    def __init__(self, dataset: Dataset, tau: float = 1.0, sigma0: float = 10.0):
        X = np.asarray(dataset["x"], float)
        y = np.asarray(dataset["y"], float)
        n, p = X.shape
        if y.shape != (n,):
            raise ContractViolation("horseshoe: y must have one entry per row of x")
        self.p = p
        a = (0,) + tuple(range(p + 1, 2 * p + 1))
        b = tuple(range(1, p + 1))
        names = (["beta0"] + [f"beta[{j}]" for j in range(1, p + 1)]
                 + [f"log_lambda[{j}]" for j in range(1, p + 1)])
        super().__init__(BlockStructure((a, b)), (X, y, np.array([tau, sigma0])),
                         {"tau": tau, "sigma0": sigma0, "n": n, "p": p}, names,
                         dataset)

    def report_quantities(self, samples):
        p = self.p
        return [("beta0", samples[:, :1]), ("beta", samples[:, 1:p + 1]),
                ("log_lambda", samples[:, p + 1:])]


class StochasticVolatility(TargetModel):
    """Stochastic volatility model with AR(1) log-volatility.

    Coordinates ``(phi*, log kappa, log sigma^2, x_0..x_T)`` with
    ``phi = tanh(phi*/2)``. Three blocks in that order.
    ``phi_star_var`` is the prior variance of ``phi*`` (default 2).
    """

    name = "sv"
    kernel_id = SV_ID

    def __init__(self, dataset: Dataset, phi_star_var: float = 2.0,
                 kappa_logmean: float = -2.0, kappa_logsd: float = 1.0,
                 sigma2_shape: float = 4.0, sigma2_scale: float = 4.0):
        y = np.asarray(dataset["y"], float)
        T = y.shape[0]
        self.T = T
        blocks = BlockStructure(((0,), (1, 2), tuple(range(3, T + 4))))
        hyper = {"phi_star_var": phi_star_var, "kappa_logmean": kappa_logmean,
                 "kappa_logsd": kappa_logsd, "sigma2_shape": sigma2_shape,
                 "sigma2_scale": sigma2_scale, "T": T}
        c = np.array([kappa_logmean, kappa_logsd, phi_star_var,
                      sigma2_shape, sigma2_scale])
        names = (["phi_star", "log_kappa", "log_sigma2"]
                 + [f"x[{t}]" for t in range(T + 1)])
        super().__init__(blocks, (np.zeros((1, 1)), y, c), hyper, names, dataset)

    def report_quantities(self, samples):
        return [("kappa", np.exp(samples[:, 1:2])),
                ("phi", np.tanh(0.5 * samples[:, :1])),
                ("sigma2", np.exp(samples[:, 2:3])),
                ("x", samples[:, 3:])]


class NegativeBinomial(TargetModel):
    """Random-effects model with negative binomial counts.

    Coordinates ``(mu, log nu, eta_1..eta_G)``; blocks ``A = (mu, log nu)``,
    ``B = eta``. Size-probability parameterisation with mean ``exp(eta_i)``.
    """

    name = "negbin"
    kernel_id = NEGBIN_ID

    def __init__(self, dataset: Dataset, nu_shape: float = 1.0,
                 nu_scale: float = 0.5, mu_sd: float = 10.0, eta_sd: float = 3.0):
        Y = np.asarray(dataset["y"], float)
        if Y.ndim != 2 or np.any(Y < 0):
            raise ContractViolation("negbin: counts must be a non-negative G x J array")
        G = Y.shape[0]
        self.G = G
        blocks = BlockStructure(((0, 1), tuple(range(2, G + 2))))
        hyper = {"nu_shape": nu_shape, "nu_scale": nu_scale, "mu_sd": mu_sd,
                 "eta_sd": eta_sd, "G": G, "J": Y.shape[1]}
        names = ["mu", "log_nu"] + [f"eta[{i}]" for i in range(1, G + 1)]
        super().__init__(blocks, (Y, np.zeros(1),
                                  np.array([nu_shape, nu_scale, mu_sd, eta_sd])),
                         hyper, names, dataset)

    def report_quantities(self, samples):
        return [("mu", samples[:, :1]), ("log_nu", samples[:, 1:2]),
                ("eta", samples[:, 2:])]


# ----------------------------------------------------------------------------
# data generation and ingestion

SYNTHETIC_DEFAULTS: dict[str, dict] = {
    "funnel": {},
    "gaussian": {},
    "horseshoe": {"n": 100, "p": 20, "rho": 0.8, "n_signal": 5, "signal": 1.0},
    "negbin": {"groups": 50, "per_group": 5, "mu": 10.0, "nu": 0.5, "eta_sd": 3.0},
    "sv": {"T": 480, "kappa": 0.05, "phi": 0.9, "sigma2": 0.3},
}


def generate_synthetic(name: str, seed: int, **hyperparameters) -> Dataset:
    """Simulate a dataset for ``name``; deterministic given ``seed``."""
    if name not in SYNTHETIC_DEFAULTS:
        raise ContractViolation(f"unknown model {name!r}; expected one of "
                                f"{sorted(SYNTHETIC_DEFAULTS)}")
    unknown = set(hyperparameters) - set(SYNTHETIC_DEFAULTS[name])
    if unknown:
        raise ContractViolation(f"unknown {name} data options {sorted(unknown)}")
    h = {**SYNTHETIC_DEFAULTS[name], **hyperparameters}
    rng = np.random.default_rng(seed)
    if name in ("funnel", "gaussian"):
        return Dataset(name, {})
    if name == "horseshoe":
        n, p = int(h["n"]), int(h["p"])
        cov = np.full((p, p), h["rho"])
        np.fill_diagonal(cov, 1.0)
        X = rng.multivariate_normal(np.zeros(p), cov, size=n, method="cholesky")
        beta = np.zeros(p)
        beta[: int(h["n_signal"])] = h["signal"]
        prob = 1.0 / (1.0 + np.exp(-(X @ beta)))
        y = (rng.random(n) < prob).astype(np.int64)
        return Dataset(name, {"y": y, "x": X})
    if name == "negbin":
        G, J = int(h["groups"]), int(h["per_group"])
        eta = rng.normal(h["mu"], h["eta_sd"], size=G)
        prob = h["nu"] / (h["nu"] + np.exp(eta))
        Y = rng.negative_binomial(h["nu"], np.repeat(prob[:, None], J, axis=1))
        return Dataset(name, {"y": Y.astype(np.int64)})
    # stochastic volatility, simulated from its own generative process
    T = int(h["T"])
    phi, s2 = h["phi"], h["sigma2"]
    x = np.empty(T + 1)
    x[0] = rng.normal(0.0, math.sqrt(s2 / (1.0 - phi * phi)))
    for t in range(1, T + 1):
        x[t] = phi * x[t - 1] + rng.normal(0.0, math.sqrt(s2))
    y = h["kappa"] * np.exp(0.5 * x[1:]) * rng.standard_normal(T)
    return Dataset(name, {"y": y})


def ingest_returns(path: str | Path, min_obs: int = 10) -> Dataset:
    """Read a single-column returns file into a centred SV dataset.

    A non-numeric first line is treated as a header. Blank lines are skipped.
    """
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except OSError as exc:
        raise ContractViolation(f"cannot read returns file {path}: {exc}") from exc
    values = []
    for lineno, raw in enumerate(lines, start=1):
        s = raw.strip()
        if not s:
            continue
        try:
            values.append(float(s))
        except ValueError:
            if lineno == 1:
                continue
            raise ContractViolation(
                f"{path}: line {lineno}: {s!r} is not a number") from None
    if len(values) < min_obs:
        raise ContractViolation(
            f"{path}: need at least {min_obs} observations, found {len(values)}")
    y = np.asarray(values)
    if not np.all(np.isfinite(y)):
        raise ContractViolation(f"{path}: non-finite return value")
    return Dataset("sv", {"y": y - y.mean()})


def funnel_energy_budget(d: int, v_grid) -> dict[str, np.ndarray]:
    """Expected-potential excess and kinetic energy band for the funnel.

    Returns columns ``v, dU_centered, dU_noncentered, K_mean, K_lo, K_hi``
    where the kinetic band is the 2.5%/97.5% quantiles of
    ``0.5 * chi2(d + 1)``.
    """
    if int(d) != d or d < 1:
        raise ContractViolation("d must be a positive integer")
    v = np.asarray(v_grid, dtype=float).ravel()
    if not np.all(np.isfinite(v)):
        raise ContractViolation("v grid must be finite")
    n = v.shape[0]
    k = d + 1
    return {
        "v": v,
        "dU_centered": 0.5 * d * v + v * v / 18.0,
        "dU_noncentered": v * v / 18.0,
        "K_mean": np.full(n, 0.5 * k),
        "K_lo": np.full(n, 0.5 * stats.chi2.ppf(0.025, k)),
        "K_hi": np.full(n, 0.5 * stats.chi2.ppf(0.975, k)),
    }
