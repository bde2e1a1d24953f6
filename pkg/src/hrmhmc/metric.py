"""Position-dependent diagonal mass matrices.

Each coordinate ``i`` carries one or two linear predictors

    eta_ik = phi_ik . x_ik(theta)

whose features ``x_ik`` are either the constant 1 or a coordinate of
``theta`` taken from a *different* block. The mass is ``exp(eta_i1)``
(constant and exponential families) or ``exp(eta_i1) + exp(eta_i2)``
(sum-of-exponentials family).

Feature maps are encoded as integer arrays so the same tables drive both the
numba kernels and the Python API: ``ONE`` (-1) denotes the constant feature,
a non-negative entry is a coordinate index and ``UNUSED`` (-2) pads.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numba as nb
import numpy as np

from .model import BlockStructure, ContractViolation, TargetModel

__all__ = [
    "ONE",
    "UNUSED",
    "ETA_CLAMP",
    "BlockMetric",
    "MetricModel",
    "MassState",
    "sample_momentum",
    "hamiltonian",
]

ONE = -1
UNUSED = -2
ETA_CLAMP = 40.0

Term = tuple[int, ...]


@dataclass(frozen=True)
class BlockMetric:
    """Mass family for one block.

    ``terms[c]`` lists the predictor feature tuples of the ``c``-th coordinate
    of the block; one tuple for the constant and exponential families, two
    for the sum family.
    """

    family: str
    terms: tuple[tuple[Term, ...], ...]

    @classmethod
    def constant(cls, size: int) -> "BlockMetric":
        return cls("constant", tuple(((ONE,),) for _ in range(size)))

    @classmethod
    def exponential(cls, features: Sequence[Sequence[int]]) -> "BlockMetric":
        return cls("exponential", tuple((tuple(f),) for f in features))

    @classmethod
    def sum_exp(cls, first: Sequence[Sequence[int]],
                second: Sequence[Sequence[int]]) -> "BlockMetric":
        if len(first) != len(second):
            raise ContractViolation("sum family needs two feature lists of equal length")
        return cls("sum", tuple((tuple(a), tuple(b)) for a, b in zip(first, second)))


# ----------------------------------------------------------------------------
# kernels


@nb.njit(cache=True, error_model="numpy")
def _eta(theta, fidx, phi, i, k):
    e = 0.0
    for f in range(fidx.shape[2]):
        j = fidx[i, k, f]
        if j == -1:
            e += phi[i, k, f]
        elif j >= 0:
            e += phi[i, k, f] * theta[j]
    return e


@nb.njit(cache=True, error_model="numpy")
def eval_coords(theta, idx, fidx, nterm, phi, logm, gw):
    """Fill ``logm[i]`` and the derivative weights ``gw[i, :]`` for ``i in idx``.

    A predictor outside ``[-ETA_CLAMP, ETA_CLAMP]`` is clamped and gets zero
    derivative weight.
    """
    for a in range(idx.shape[0]):
        i = idx[a]
        e0 = _eta(theta, fidx, phi, i, 0)
        c0 = min(max(e0, -ETA_CLAMP), ETA_CLAMP)
        in0 = 1.0 if c0 == e0 else 0.0
        if nterm[i] == 1:
            logm[i] = c0
            gw[i, 0] = in0
            gw[i, 1] = 0.0
        else:
            e1 = _eta(theta, fidx, phi, i, 1)
            c1 = min(max(e1, -ETA_CLAMP), ETA_CLAMP)
            in1 = 1.0 if c1 == e1 else 0.0
            if c0 > c1:
                lm = c0 + math.log1p(math.exp(c1 - c0))
            else:
                lm = c1 + math.log1p(math.exp(c0 - c1))
            logm[i] = lm
            gw[i, 0] = in0 * math.exp(c0 - lm)
            gw[i, 1] = in1 * math.exp(c1 - lm)


@nb.njit(cache=True, error_model="numpy")
def eval_all(theta, fidx, nterm, phi, logm, gw):
    idx = np.arange(theta.shape[0])
    eval_coords(theta, idx, fidx, nterm, phi, logm, gw)


@nb.njit(cache=True, error_model="numpy")
def scatter_grad(idx, coef, fidx, nterm, phi, gw, out):
    """``out += sum_a coef[a] * grad_theta log M_{idx[a]}``."""
    for a in range(idx.shape[0]):
        i = idx[a]
        ca = coef[a]
        if ca == 0.0:
            continue
        for k in range(nterm[i]):
            w = ca * gw[i, k]
            if w == 0.0:
                continue
            for f in range(fidx.shape[2]):
                j = fidx[i, k, f]
                if j >= 0:
                    out[j] += w * phi[i, k, f]


@nb.njit(cache=True, error_model="numpy")
def hamiltonian_kernel(U, p, logm):
    h = U
    for i in range(p.shape[0]):
        h += 0.5 * (p[i] * p[i] * math.exp(-logm[i]) + logm[i])
    return h


# ----------------------------------------------------------------------------
# Python API


@dataclass(frozen=True)
class MassState:
    """Diagonal masses evaluated at one position."""

    mass: np.ndarray
    log_mass: np.ndarray


class MetricModel:
    """Block-diagonal mass model over a fixed block structure.

    The parameter array ``phi`` has shape ``(dim, 2, n_features)``; slots
    not used by a coordinate's family are ignored and kept at zero.
    """

    def __init__(self, blocks: BlockStructure, block_metrics: Sequence[BlockMetric]):
        if len(block_metrics) != blocks.n_blocks:
            raise ContractViolation(
                f"need one mass family per block ({blocks.n_blocks}), "
                f"got {len(block_metrics)}")
        self.blocks = blocks
        self.block_metrics = tuple(block_metrics)
        dim = blocks.dim
        block_of = blocks.block_of()
        n_feat = 1
        for bm, block in zip(block_metrics, blocks.blocks):
            if bm.family not in ("constant", "exponential", "sum"):
                raise ContractViolation(f"unknown mass family {bm.family!r}")
            if len(bm.terms) != len(block):
                raise ContractViolation(
                    f"{bm.family} family lists {len(bm.terms)} coordinates, "
                    f"block has {len(block)}")
            for t in bm.terms:
                n_feat = max(n_feat, *(len(term) for term in t))
        fidx = np.full((dim, 2, n_feat), UNUSED, dtype=np.int64)
        nterm = np.ones(dim, dtype=np.int64)
        for k, (bm, block) in enumerate(zip(block_metrics, blocks.blocks)):
            want = 2 if bm.family == "sum" else 1
            for i, t in zip(block, bm.terms):
                if len(t) != want:
                    raise ContractViolation(
                        f"{bm.family} family needs {want} predictor(s) per coordinate")
                if bm.family == "constant" and t != ((ONE,),):
                    raise ContractViolation("constant family takes only the feature ONE")
                nterm[i] = want
                for s, term in enumerate(t):
                    for f, j in enumerate(term):
                        if j != ONE and not 0 <= j < dim:
                            raise ContractViolation(f"feature index {j} out of range")
                        if j >= 0 and block_of[j] == k:
                            raise ContractViolation(
                                f"mass of coordinate {i} may not depend on its own "
                                f"block (feature coordinate {j})")
                        fidx[i, s, f] = j
        self.fidx = fidx
        self.nterm = nterm
        self.n_features = n_feat
        self.bptr = np.cumsum([0] + [len(b) for b in blocks.blocks]).astype(np.int64)
        self.bidx = np.array([i for b in blocks.blocks for i in b], dtype=np.int64)
        self.order = np.array(blocks.flow_order, dtype=np.int64)

    @property
    def dim(self) -> int:
        return self.blocks.dim

    def parameter_mask(self) -> np.ndarray:
        """Boolean mask of the ``phi`` entries that are actually used."""
        mask = self.fidx != UNUSED
        mask[:, 1, :] &= (self.nterm == 2)[:, None]
        return mask

    def init_phi(self) -> np.ndarray:
        return np.zeros(self.fidx.shape)

    def constant_in_theta(self, block: int) -> bool:
        idx = list(self.blocks.blocks[block])
        return bool(np.all(self.fidx[idx] < 0))

    def _check(self, theta, phi):
        theta = np.ascontiguousarray(theta, dtype=np.float64)
        phi = np.ascontiguousarray(phi, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise ContractViolation(f"theta must have length {self.dim}")
        if phi.shape != self.fidx.shape:
            raise ContractViolation(
                f"phi must have shape {self.fidx.shape}, got {phi.shape}")
        return theta, phi

    def _block_idx(self, block: int) -> np.ndarray:
        if not 0 <= block < self.blocks.n_blocks:
            raise ContractViolation(f"block index {block} out of range")
        return self.bidx[self.bptr[block]:self.bptr[block + 1]]

    def _eval(self, theta, phi, idx):
        logm = np.zeros(self.dim)
        gw = np.zeros((self.dim, 2))
        eval_coords(theta, idx, self.fidx, self.nterm, phi, logm, gw)
        return logm, gw

    def log_mass(self, theta, phi) -> np.ndarray:
        theta, phi = self._check(theta, phi)
        return self._eval(theta, phi, np.arange(self.dim))[0]

    def mass_state(self, theta, phi) -> MassState:
        lm = self.log_mass(theta, phi)
        return MassState(np.exp(lm), lm)

    def mass_diag(self, block: int, theta, phi) -> np.ndarray:
        """Masses of the coordinates of ``block`` (in block order)."""
        theta, phi = self._check(theta, phi)
        idx = self._block_idx(block)
        return np.exp(self._eval(theta, phi, idx)[0][idx])

    def mixture_weights(self, block: int, theta, phi) -> np.ndarray:
        """``w_ik = exp(eta_ik) / M_i`` (zero for clamped or unused predictors)."""
        theta, phi = self._check(theta, phi)
        idx = self._block_idx(block)
        return self._eval(theta, phi, idx)[1][idx]

    def grad_log_mass_theta(self, block: int, theta, phi) -> np.ndarray:
        """Rows are ``grad_theta log M_i`` for the coordinates of ``block``."""
        theta, phi = self._check(theta, phi)
        idx = self._block_idx(block)
        _, gw = self._eval(theta, phi, idx)
        out = np.zeros((idx.size, self.dim))
        for a, i in enumerate(idx):
            scatter_grad(np.array([i]), np.ones(1), self.fidx, self.nterm, phi,
                         gw, out[a])
        return out

    def features(self, theta, idx=None) -> np.ndarray:
        """Feature values with the layout of ``phi`` (zero where unused)."""
        theta = np.asarray(theta, dtype=float)
        f = self.fidx if idx is None else self.fidx[idx]
        vals = np.where(f >= 0, theta[np.clip(f, 0, None)], 0.0)
        return np.where(f == ONE, 1.0, vals)

    def grad_log_mass_phi(self, block: int, theta, phi) -> np.ndarray:
        """``grad_phi log M_i`` for the coordinates of ``block``, shape ``(n, 2, F)``."""
        theta, phi = self._check(theta, phi)
        idx = self._block_idx(block)
        _, gw = self._eval(theta, phi, idx)
        return self.features(theta, idx) * gw[idx][:, :, None]

    def grad_log_mass_phi_all(self, theta, phi) -> tuple[np.ndarray, np.ndarray]:
        """Log masses and ``grad_phi log M_i`` for every coordinate.

        The gradient ignores the predictor clamp, so a clamped coordinate can
        still be pulled back into range by the adaptation.
        """
        theta, phi = self._check(theta, phi)
        logm, _ = self._eval(theta, phi, np.arange(self.dim))
        x = self.features(theta)
        eta = (x * phi).sum(axis=2)
        eta[self.nterm == 1, 1] = -np.inf
        w = np.exp(eta - eta.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        return logm, x * w[:, :, None]

    # φ serialization: one row per used entry

    def phi_rows(self, phi) -> list[tuple[int, int, int, int, float]]:
        mask = self.parameter_mask()
        block_of = self.blocks.block_of()
        rows = []
        for i, s, f in zip(*np.nonzero(mask)):
            rows.append((int(block_of[i]), int(i), int(s), int(f), float(phi[i, s, f])))
        return rows

    def write_phi_csv(self, phi, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["block", "coordinate", "slot", "component", "value"])
            for r in self.phi_rows(phi):
                w.writerow([*r[:4], repr(r[4])])

    def read_phi_csv(self, path: str | Path) -> np.ndarray:
        phi = self.init_phi()
        mask = self.parameter_mask()
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            for lineno, row in enumerate(reader, start=2):
                try:
                    i, s, f = int(row["coordinate"]), int(row["slot"]), int(row["component"])
                    value = float(row["value"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise ContractViolation(f"{path}: line {lineno}: bad row") from exc
                if not (0 <= i < self.dim and 0 <= s < 2
                        and 0 <= f < self.n_features and mask[i, s, f]):
                    raise ContractViolation(
                        f"{path}: line {lineno}: ({i}, {s}, {f}) is not a parameter")
                phi[i, s, f] = value
        return phi


def sample_momentum(masses: MassState | np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draw ``p ~ N(0, diag(M))``."""
    m = masses.mass if isinstance(masses, MassState) else np.asarray(masses, float)
    return np.sqrt(m) * rng.standard_normal(m.shape[0])


def hamiltonian(model: TargetModel, metric: MetricModel, theta, p, phi) -> float:
    """``U + 0.5 p' M^-1 p + 0.5 log det M``; non-finite values are returned as is."""
    p = np.asarray(p, dtype=float)
    if p.shape != (metric.dim,):
        raise ContractViolation(f"momentum must have length {metric.dim}")
    logm = metric.log_mass(theta, phi)
    return float(hamiltonian_kernel(model.potential(theta), p, logm))
