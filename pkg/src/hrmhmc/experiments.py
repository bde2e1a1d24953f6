"""Registry of benchmark models and sampling methods."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .metric import ONE, BlockMetric, MetricModel
from .model import (BlockStructure, ContractViolation, Funnel, Gaussian, Horseshoe,
                    NegativeBinomial, StochasticVolatility, TargetModel,
                    generate_synthetic, ingest_returns)

__all__ = ["MODELS", "METHODS", "build_model", "build_metric", "oracle_funnel_phi"]

MODELS = ("funnel", "horseshoe", "sv", "negbin", "gaussian")
METHODS = ("block-exp", "block-sum-exp", "diagonal", "hmc-fixed", "nuts-plain")

# model constructor options (data-generation options are passed separately)
MODEL_OPTIONS = {
    "funnel": {"d": 20},
    "gaussian": {"dim": 10},
    "horseshoe": {"tau": 1.0, "sigma0": 10.0},
    "sv": {"phi_star_var": 2.0},
    "negbin": {},
}


def build_model(name: str, options: dict | None = None, data_seed: int = 0,
                data_options: dict | None = None, data_file: str | Path | None = None
                ) -> TargetModel:
    """Construct a model, simulating its data from ``data_seed`` when needed."""
    options = dict(options or {})
    if name not in MODELS:
        raise ContractViolation(f"unknown model {name!r}; expected one of {MODELS}")
    unknown = set(options) - set(MODEL_OPTIONS[name])
    if unknown:
        raise ContractViolation(f"unknown {name} model options {sorted(unknown)}")
    if data_file is not None and name != "sv":
        raise ContractViolation("a returns file can only be used with the sv model")
    if name == "funnel":
        return Funnel(int(options.get("d", 20)))
    if name == "gaussian":
        return Gaussian(int(options.get("dim", 10)))
    if data_file is not None:
        dataset = ingest_returns(data_file)
    else:
        dataset = generate_synthetic(name, data_seed, **(data_options or {}))
    if name == "horseshoe":
        return Horseshoe(dataset, **options)
    if name == "sv":
        return StochasticVolatility(dataset, **options)
    return NegativeBinomial(dataset, **options)


def _lower_block(model: TargetModel, family: str) -> list[BlockMetric]:
    """Families for the hierarchical blocks of ``model``; upper blocks are constant."""
    blocks = model.blocks.blocks
    if model.name == "gaussian":
        return [BlockMetric.constant(len(b)) for b in blocks]
    if model.name == "funnel":
        first = [(ONE, 0)] * len(blocks[1])
    elif model.name == "horseshoe":
        p = model.p
        first = [(ONE, 1 + p + j) for j in range(p)]
    elif model.name == "negbin":
        first = [(ONE, 1)] * len(blocks[1])
    elif model.name == "sv":
        first = [(ONE, 2)] * len(blocks[2])
    else:
        raise ContractViolation(f"no hierarchical mass layout for {model.name!r}")
    lower = (BlockMetric.exponential(first) if family == "exp"
             else BlockMetric.sum_exp(first, [(ONE,)] * len(first)))
    upper = [BlockMetric.constant(len(b)) for b in blocks[:-1]]
    if model.name == "sv":
        # the (kappa, sigma^2) block uses the exponential family with feature [1]
        upper[1] = BlockMetric.exponential([(ONE,)] * len(blocks[1]))
    return upper + [lower]


def build_metric(model: TargetModel, method: str) -> MetricModel:
    if method not in METHODS:
        raise ContractViolation(f"unknown method {method!r}; expected one of {METHODS}")
    if method in ("block-exp", "block-sum-exp"):
        family = "exp" if method == "block-exp" else "sum"
        return MetricModel(model.blocks, _lower_block(model, family))
    single = BlockStructure.single(model.dim)
    return MetricModel(single, [BlockMetric.constant(model.dim)])


def oracle_funnel_phi(metric: MetricModel) -> np.ndarray:
    """Parameters giving ``M_x = exp(-v)`` and ``M_v = 1`` on the funnel."""
    phi = metric.init_phi()
    lower = list(metric.blocks.blocks[-1])
    phi[lower, 0, 1] = -1.0
    return phi
