"""Effective sample sizes, Monte Carlo errors and run summaries."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ContractViolation

__all__ = [
    "autocorrelation",
    "ess_geyer",
    "ess_columns",
    "mcse",
    "ChainSummary",
    "summarize",
    "format_table",
    "write_table_csv",
]

MIN_LENGTH = 100


def autocorrelation(x, max_lag: int | None = None) -> np.ndarray:
    """Normalised autocorrelations ``rho_0..rho_max_lag`` computed by FFT."""
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    max_lag = n // 2 if max_lag is None else min(max_lag, n - 1)
    xc = x - x.mean()
    size = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(xc, n=size)
    acov = np.fft.irfft(f * np.conj(f), n=size)[: max_lag + 1] / n
    if not acov[0] > 0:
        raise ContractViolation("ESS is undefined for a constant chain")
    return acov / acov[0]


def ess_geyer(chain) -> float:
    """ESS with Geyer's initial monotone sequence estimator.

    Pair sums ``rho_2m + rho_2m+1`` are kept up to the first negative one and
    then forced to be non-increasing.
    """
    x = np.asarray(chain, dtype=float).ravel()
    n = x.shape[0]
    if n < MIN_LENGTH:
        raise ContractViolation(f"chain of length {n} is too short (need {MIN_LENGTH})")
    if not np.all(np.isfinite(x)):
        raise ContractViolation("chain contains non-finite values")
    if np.ptp(x) == 0:
        raise ContractViolation("ESS is undefined for a constant chain")
    rho = autocorrelation(x)
    n_pairs = rho.shape[0] // 2
    pairs = rho[: 2 * n_pairs].reshape(n_pairs, 2).sum(axis=1)
    neg = np.nonzero(pairs < 0)[0]
    if neg.size:
        pairs = pairs[: neg[0]]
    pairs = np.minimum.accumulate(pairs)
    tau = 2.0 * pairs.sum() - 1.0
    return float(n / max(tau, 1e-12))


def ess_columns(samples) -> np.ndarray:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    return np.array([ess_geyer(samples[:, j]) for j in range(samples.shape[1])])


def mcse(chain) -> float:
    """Monte Carlo standard error of the mean."""
    x = np.asarray(chain, dtype=float)
    return float(np.sqrt(x.var(ddof=1) / ess_geyer(x)))


@dataclass
class ChainSummary:
    """Per-parameter and per-group statistics of one chain."""

    names: list[str]
    mean: np.ndarray
    variance: np.ndarray
    ess: np.ndarray
    n_grad: int
    divergence_fraction: float
    mean_depth: float
    groups: dict[str, float] = field(default_factory=dict)
    group_sizes: dict[str, int] = field(default_factory=dict)

    @property
    def ess_per_1000_grad(self) -> np.ndarray:
        return 1000.0 * self.ess / max(self.n_grad, 1)

    def row(self) -> dict[str, float]:
        """Table-style row: gradient count, divergences and group ESS/grad."""
        out: dict[str, float] = {"n_grad": float(self.n_grad),
                                 "divergent_pct": 100.0 * self.divergence_fraction}
        for label, value in self.groups.items():
            prefix = "min " if self.group_sizes[label] > 1 else ""
            out[f"{prefix}1000ESS/grad({label})"] = value
        return out


def _group_ess(values: np.ndarray) -> np.ndarray:
    out = np.empty(values.shape[1])
    for j in range(values.shape[1]):
        try:
            out[j] = ess_geyer(values[:, j])
        except ContractViolation:
            out[j] = 0.0
    return out


def summarize(samples, n_grad: int, names: Sequence[str] | None = None,
              divergent=None, depth=None, groups=None) -> ChainSummary:
    """Summarise post-burn-in samples.

    ``groups`` is a list of ``(label, values)`` with ``values`` of shape
    ``(N, m)``; each group is reported as the minimum ``1000 ESS / n_grad``
    over its columns.
    """
    samples = np.asarray(samples, dtype=float)
    if samples.ndim != 2:
        raise ContractViolation("samples must be a 2-D array")
    names = list(names) if names is not None else [f"theta[{i}]" for i in range(samples.shape[1])]
    ess = _group_ess(samples)
    div = 0.0 if divergent is None or len(divergent) == 0 else float(np.mean(divergent))
    dep = float("nan") if depth is None or len(depth) == 0 else float(np.mean(depth))
    summary = ChainSummary(names, samples.mean(axis=0), samples.var(axis=0, ddof=1), ess,
                           int(n_grad), div, dep)
    scale = 1000.0 / max(int(n_grad), 1)
    for label, values in groups or []:
        values = np.asarray(values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        summary.groups[label] = float(np.min(_group_ess(values)) * scale)
        summary.group_sizes[label] = values.shape[1]
    return summary


def format_table(rows: Sequence[dict], first: str = "method") -> str:
    """Align a list of row dicts as a plain-text table."""
    if not rows:
        return ""
    cols = [first] + [c for c in rows[0] if c != first]
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]

    def cell(v):
        if isinstance(v, float):
            return f"{v:.0f}" if abs(v) >= 1e4 else f"{v:.3g}" if v != 0 else "0"
        return str(v)

    body = [[cell(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) for i, c in enumerate(cols)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.ljust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines) + "\n"


def write_table_csv(rows: Sequence[dict], path: str | Path, first: str = "method") -> None:
    cols = [first] + [c for c in rows[0] if c != first] if rows else [first]
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: (repr(v) if isinstance(v, float) else v) for c, v in r.items()})
