"""Shared helpers for the test modules."""

import numpy as np

from hrmhmc.integrator import PhasePoint


def random_point(model, rng, scale=1.0):
    """A moderate random point; the SV and negbin latent states sit near the data."""
    theta = scale * rng.standard_normal(model.dim)
    if model.name == "negbin":
        theta[0] = 10.0 + rng.standard_normal()
        theta[1] = -0.7 + 0.3 * rng.standard_normal()
        y = np.asarray(model.dataset["y"], float)
        theta[2:] = np.log(y.mean(axis=1) + 1.0) + 0.3 * rng.standard_normal(model.G)
    if model.name == "sv":
        theta[0] = 2.0 + 0.5 * rng.standard_normal()
        theta[1] = -3.0 + 0.3 * rng.standard_normal()
        theta[2] = np.log(0.3) + 0.3 * rng.standard_normal()
    return theta


def random_phi(metric, rng, scale=0.3):
    mask = metric.parameter_mask()
    return np.where(mask, rng.uniform(-scale, scale, mask.shape), 0.0)


def random_state(model, metric, phi, rng):
    """A random point with momentum drawn from the mass-matrix distribution at that point."""
    theta = random_point(model, rng, 0.5)
    p = np.sqrt(metric.mass_state(theta, phi).mass) * rng.standard_normal(model.dim)
    return PhasePoint(theta, p)
