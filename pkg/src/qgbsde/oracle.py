"""Closed-form references for validating the solvers.

For b = 0, constant sigma, driver (gamma/2) |z|^2 and bounded terminal g, the
exponential (Cole-Hopf) transform linearizes the backward equation:

    Y_0 = (1/gamma) log E[ exp(gamma g(x0 + sigma sqrt(T) U)) ],   U ~ N(0, 1)
    Z_0 = sigma E[ g'(.) e^{gamma g(.)} ] / E[ e^{gamma g(.)} ]

evaluated by Gauss-Hermite quadrature. The error estimate is the change under
node doubling; exceeding the stability tolerance raises QuadratureUnstable.

Separately, bmo_bound gives the closed-form bound on the BMO norm of the
control process implied by a bounded terminal value and the quadratic growth
certificate M.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss

from .errors import InvalidParameters, QuadratureUnstable
from .model import ModelSpec


@dataclass(frozen=True)
class OracleResult:
    y0: float
    z0: float | None
    error_estimate: float
    nodes: int


def _gh_expectations(gamma, terminal, terminal_grad, x0, sigma, T, nodes):
    u, w = hermgauss(nodes)
    pts = x0 + sigma * math.sqrt(T) * math.sqrt(2.0) * u
    gv = np.asarray(terminal(pts))
    if not np.isfinite(gv).all():
        raise InvalidParameters("terminal function returned non-finite values")
    weights = w / math.sqrt(math.pi)
    expg = np.exp(gamma * gv)
    ey = float(weights @ expg)
    y0 = math.log(ey) / gamma
    z0 = None
    if terminal_grad is not None:
        gpv = np.asarray(terminal_grad(pts))
        z0 = sigma * float(weights @ (gpv * expg)) / ey
    return y0, z0


def cole_hopf_reference(gamma: float, terminal, x0: float, sigma: float, T: float,
                        nodes: int = 128, terminal_grad=None,
                        stability_tol: float = 1e-8) -> OracleResult:
    """Reference (Y_0, Z_0) for the purely quadratic driver.

    terminal (and terminal_grad, if given) act on a plain 1-d array of
    points. Z_0 is only computed when terminal_grad is supplied.
    """
    if gamma == 0.0:
        raise InvalidParameters("gamma must be nonzero")
    if sigma <= 0.0 or T <= 0.0:
        raise InvalidParameters(f"need sigma > 0 and T > 0, got sigma={sigma}, T={T}")
    if nodes < 2:
        raise InvalidParameters(f"need at least 2 quadrature nodes, got {nodes}")
    y0, z0 = _gh_expectations(gamma, terminal, terminal_grad, x0, sigma, T, nodes)
    y0_fine, z0_fine = _gh_expectations(gamma, terminal, terminal_grad, x0, sigma,
                                        T, 2 * nodes)
    err = abs(y0 - y0_fine)
    if err > stability_tol:
        raise QuadratureUnstable(
            f"value moved {err:.3e} under node doubling ({nodes} -> {2 * nodes}), "
            f"tolerance {stability_tol:.1e}")
    return OracleResult(y0=y0_fine, z0=z0_fine if z0 is not None else None,
                        error_estimate=err, nodes=nodes)


def cole_hopf_from_model(model: ModelSpec, nodes: int = 128,
                         stability_tol: float = 1e-8) -> OracleResult:
    """Apply the reference to a model after probing its preconditions.

    Requires m = d = 1, vanishing drift, state-independent diffusion, and a
    driver of the form (gamma/2)|z|^2 (as certified by the preset metadata).
    """
    if model.m != 1 or model.d != 1:
        raise InvalidParameters("oracle needs a one-dimensional model")
    meta = model.meta
    if meta.get("preset") != "quadratic" or meta.get("rate", 0.0) != 0.0:
        raise InvalidParameters(
            "oracle applies to the purely quadratic driver presets only")
    probe = np.linspace(-1.0, 1.0, 7)[:, None] + model.x0[0]
    for t in (0.0, 0.5 * model.T, model.T):
        if np.any(np.asarray(model.b(t, probe)) != 0.0):
            raise InvalidParameters("oracle needs zero drift")
        sig = np.asarray(model.sigma(t, probe))[:, 0, 0]
        if np.any(sig != sig[0]):
            raise InvalidParameters("oracle needs state-independent diffusion")
    sigma = float(np.asarray(model.sigma(0.0, probe))[0, 0, 0])
    grad = None
    if model.g_grad is not None:
        grad = lambda pts: np.asarray(model.g_grad(pts[:, None]))[:, 0]
    return cole_hopf_reference(meta["gamma"], lambda pts: np.asarray(model.g(pts[:, None])),
                               float(model.x0[0]), sigma, model.T, nodes=nodes,
                               terminal_grad=grad, stability_tol=stability_tol)


def bmo_bound(M: float, T: float, xi_sup: float) -> float:
    """Closed-form BMO bound (4 + 6 M^2 T) / (3 M^2) * exp(6 M xi_sup + M T)."""
    if M <= 0.0:
        raise InvalidParameters(f"growth constant M must be positive, got {M}")
    if T <= 0.0:
        raise InvalidParameters(f"horizon must be positive, got {T}")
    if xi_sup < 0.0:
        raise InvalidParameters(f"terminal sup bound must be >= 0, got {xi_sup}")
    return (4.0 + 6.0 * M * M * T) / (3.0 * M * M) * math.exp(6.0 * M * xi_sup + M * T)
