"""The adaptive sampling loop and its outputs.

Each iteration builds the mass matrix from the current parameters, advances
the chain by one transition, and then updates the running mean gradient, the
clip threshold, the mass parameters and the step size, in that order.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .adapt import AdaptState, AdaptToggles, LearningSchedule, adapt_step
from .diagnostics import ChainSummary, format_table, summarize, write_table_csv
from .experiments import METHODS, MODELS, build_metric, build_model
from .integrator import Integrator
from .metric import MetricModel
from .model import ContractViolation, TargetModel
from .trajectory import Workspace, nuts_transition, static_transition

__all__ = ["SamplerConfig", "RunOutput", "run_chain", "STATS_COLUMNS"]

STATS_COLUMNS = ("iteration", "depth", "n_grad", "divergent", "accept_stat", "step_size")


@dataclass(frozen=True)
class SamplerConfig:
    """Complete description of one chain.

    ``iterations`` counts all iterations including the ``burn_in`` ones.
    ``step_size`` is the initial step size; ``None`` selects 0.1, or 0.01
    for ``hmc-fixed`` whose step size is never adapted.
    """

    model: str = "funnel"
    method: str = "block-exp"
    model_options: dict = field(default_factory=dict)
    data_options: dict = field(default_factory=dict)
    data_seed: int = 0
    data_file: str | None = None
    integrator: str = "multi_block"
    flow_order: tuple[int, ...] | None = None
    uturn: str = "euclidean"
    iterations: int = 60000
    burn_in: int = 10000
    seed: int = 1
    n0: int = 5
    kappa: float = 0.75
    clip_quantile: float = 0.9
    target_accept: float = 0.8
    delta_max: float = 1000.0
    max_depth: int = 10
    step_size: float | None = None
    hmc_steps: int = 100
    clipping: bool = True
    mean_est: bool = True
    adapt_metric: bool = True
    adapt_step_size: bool = True
    max_log_step: float | None = 1.0
    initial_variance: float = 0.1
    thin: int = 1
    trace_every: int = 1
    phi_init: tuple | None = None

    def __post_init__(self):
        if self.model not in MODELS:
            raise ContractViolation(f"unknown model {self.model!r}; expected one of {MODELS}")
        if self.method not in METHODS:
            raise ContractViolation(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.integrator not in ("multi_block", "two_block"):
            raise ContractViolation(f"unknown integrator {self.integrator!r}")
        if self.uturn not in ("euclidean", "generalized"):
            raise ContractViolation(f"unknown U-turn rule {self.uturn!r}")
        if not self.iterations > self.burn_in >= 0:
            raise ContractViolation("need iterations > burn_in >= 0")
        if self.max_depth < 0 or self.hmc_steps < 1:
            raise ContractViolation("max_depth must be >= 0 and hmc_steps >= 1")
        if self.thin < 1 or self.trace_every < 1:
            raise ContractViolation("thin and trace_every must be >= 1")
        if not self.delta_max > 0 or not self.initial_variance > 0:
            raise ContractViolation("delta_max and initial_variance must be positive")
        if self.step_size is not None and not self.step_size > 0:
            raise ContractViolation("step_size must be positive")
        self.schedule()
        if self.phi_init is not None:
            object.__setattr__(self, "phi_init", _freeze(self.phi_init))
        if self.flow_order is not None:
            object.__setattr__(self, "flow_order", tuple(int(b) for b in self.flow_order))

    def schedule(self) -> LearningSchedule:
        return LearningSchedule(self.n0, self.kappa, self.clip_quantile, self.target_accept)

    def toggles(self) -> AdaptToggles:
        fixed = self.method == "hmc-fixed"
        return AdaptToggles(
            clipping=self.clipping,
            mean_est=self.mean_est,
            adapt_metric=self.adapt_metric and self.method not in ("nuts-plain", "hmc-fixed"),
            adapt_step_size=self.adapt_step_size and not fixed,
            max_log_step=self.max_log_step,
        )

    def initial_step_size(self) -> float:
        if self.step_size is not None:
            return float(self.step_size)
        return 0.01 if self.method == "hmc-fixed" else 0.1

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["flow_order"] is not None:
            d["flow_order"] = list(d["flow_order"])
        if d["phi_init"] is not None:
            d["phi_init"] = np.asarray(self.phi_init).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SamplerConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ContractViolation(f"unknown sampler fields {sorted(unknown)}")
        return cls(**d)


def _freeze(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return float(a)
    return tuple(_freeze(x) for x in a)


@dataclass
class RunOutput:
    """Everything produced by one chain.

    ``samples`` holds the post-burn-in draws (thinned by ``config.thin``);
    ``stats`` has one entry per iteration; ``phi_trace`` rows are recorded
    every ``config.trace_every`` iterations with columns ``trace_columns``.
    ``n_grad_sampling`` counts gradients after burn-in and is the
    denominator of the reported ESS per gradient.
    """

    config: SamplerConfig
    param_names: list[str]
    samples: np.ndarray
    stats: dict[str, np.ndarray]
    trace_columns: list[str]
    phi_trace: np.ndarray
    final_state: AdaptState
    n_grad_total: int
    n_grad_sampling: int
    summary: ChainSummary
    model: TargetModel = field(repr=False, default=None)
    metric: MetricModel = field(repr=False, default=None)

    @property
    def divergence_fraction(self) -> float:
        b = self.config.burn_in
        return float(np.mean(self.stats["divergent"][b:]))

    def summary_row(self) -> dict:
        return {"method": self.config.method, **self.summary.row()}

    def save(self, out_dir: str | Path) -> None:
        """Write samples, stats, traces, summary and a run manifest."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_matrix(out / "samples.csv",
                      ["iteration"] + self.param_names,
                      np.column_stack([self.sample_iterations(), self.samples]))
        with open(out / "stats.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(STATS_COLUMNS)
            s = self.stats
            for row in zip(*(s[c] for c in STATS_COLUMNS)):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), int(row[3]),
                            repr(float(row[4])), repr(float(row[5]))])
        _write_matrix(out / "phi_trace.csv", self.trace_columns, self.phi_trace)
        rows = [self.summary_row()]
        write_table_csv(rows, out / "summary.csv")
        (out / "summary.txt").write_text(format_table(rows))
        manifest = {
            "config": self.config.to_dict(),
            "n_grad_total": self.n_grad_total,
            "n_grad_sampling": self.n_grad_sampling,
            "divergence_fraction": self.divergence_fraction,
            "final_step_size": self.final_state.step_size,
            "files": ["samples.csv", "stats.csv", "phi_trace.csv",
                      "summary.csv", "summary.txt"],
        }
        (out / "meta.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    def sample_iterations(self) -> np.ndarray:
        c = self.config
        return np.arange(c.burn_in + 1, c.iterations + 1)[:: c.thin]


def _write_matrix(path, header, matrix):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in np.asarray(matrix):
            w.writerow([repr(float(v)) for v in row])


def _phi_columns(metric: MetricModel, names: list[str]):
    mask = metric.parameter_mask()
    coords, slots, comps = np.nonzero(mask)
    labels = [f"phi[{names[i]}][{s}][{f}]" for i, s, f in zip(coords, slots, comps)]
    return (coords, slots, comps), labels


def run_chain(config: SamplerConfig) -> RunOutput:
    """Run one adaptive chain; deterministic given the config."""
    model = build_model(config.model, config.model_options, config.data_seed,
                        config.data_options, config.data_file)
    metric = build_metric(model, config.method)
    phi0 = None if config.phi_init is None else np.asarray(config.phi_init, dtype=float)
    state = AdaptState.initial(metric, config.initial_step_size(), phi=phi0)
    schedule = config.schedule()
    toggles = config.toggles()
    if config.integrator == "two_block" and config.method in ("diagonal", "nuts-plain",
                                                              "hmc-fixed"):
        scheme = "multi_block"  # a single block has no two-block split
    else:
        scheme = config.integrator
    integ = Integrator(model, metric, state.phi, scheme, config.flow_order)
    rng = np.random.default_rng(config.seed)

    theta = model.initial_point(rng, config.initial_variance)
    U, gU = model.potential_and_grad(theta)
    if not (math.isfinite(U) and np.all(np.isfinite(gU))):
        raise ContractViolation(
            f"{model.name}: non-finite potential at the initial point theta0={theta.tolist()}")

    N, burn = config.iterations, config.burn_in
    ws = Workspace(model.dim, 0 if config.method == "hmc-fixed" else config.max_depth)
    sampled = np.empty((N - burn, model.dim))
    stats = {c: np.zeros(N) for c in STATS_COLUMNS}
    stats["iteration"] = np.arange(1, N + 1)
    idx, trace_columns = _phi_columns(metric, model.param_names)
    trace_rows = []
    n_grad_at_burn = model.n_grad

    for k in range(1, N + 1):
        integ.phi = state.phi
        eps = state.step_size
        if config.method == "hmc-fixed":
            theta, U, gU, st = static_transition(theta, eps, config.hmc_steps, integ, rng,
                                                 config.delta_max, ws, (U, gU))
        else:
            theta, U, gU, st = nuts_transition(theta, eps, integ, rng, config.max_depth,
                                               config.delta_max, config.uturn, ws, (U, gU))
        stats["depth"][k - 1] = st.depth
        stats["n_grad"][k - 1] = st.n_grad
        stats["divergent"][k - 1] = st.divergent
        stats["accept_stat"][k - 1] = st.accept_stat
        stats["step_size"][k - 1] = eps
        state, _ = adapt_step(state, theta, -gU, st.accept_stat, metric, schedule, toggles)
        if k % config.trace_every == 0:
            trace_rows.append(np.concatenate(
                [[k, state.step_size, state.clip_threshold], state.phi[idx]]))
        if k == burn:
            n_grad_at_burn = model.n_grad
        if k > burn:
            sampled[k - burn - 1] = theta

    if not np.all(np.isfinite(sampled)):
        raise ContractViolation(f"{model.name}: non-finite sample produced")
    n_sampling = model.n_grad - n_grad_at_burn
    summary = summarize(sampled, n_sampling, model.param_names,
                        stats["divergent"][burn:], stats["depth"][burn:],
                        model.report_quantities(sampled))
    trace = (np.array(trace_rows) if trace_rows
             else np.zeros((0, 3 + len(trace_columns))))
    return RunOutput(config, list(model.param_names), sampled[:: config.thin], stats,
                     ["iteration", "step_size", "clip_threshold"] + trace_columns, trace,
                     state, model.n_grad, n_sampling, summary, model, metric)
