"""Smooth clamp family that converts quadratic drivers into Lipschitz ones.

For level n >= 0 the scalar clamp is the identity on [-n, n], a C^1 quadratic
ramp on n <= |z| <= n + 2, and saturates at +-(n + 1) beyond. It is odd,
1-Lipschitz, and satisfies |clamp(z)| <= min(|z|, n + 1). Vector arguments
are clamped componentwise.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParameters
from .model import ModelSpec


def _check_level(level):
    if not np.isscalar(level) or not np.isfinite(level) or level < 0:
        raise InvalidParameters(f"truncation level must be a finite scalar >= 0, got {level!r}")
    return float(level)


def smooth_clamp(level, z):
    """Componentwise C^1 clamp at the given level. Preserves input shape."""
    n = _check_level(level)
    z = np.asarray(z, dtype=np.float64)
    az = np.abs(z)
    ramp = (-n * n + 2.0 * n * az - az * (az - 4.0)) / 4.0
    mag = np.where(az <= n, az, np.where(az >= n + 2.0, n + 1.0, ramp))
    out = np.where(z < 0, -mag, mag)
    return out if out.ndim else float(out)


def smooth_clamp_grad(level, z):
    """Derivative of smooth_clamp in z, componentwise; values in [0, 1]."""
    n = _check_level(level)
    z = np.asarray(z, dtype=np.float64)
    az = np.abs(z)
    ramp = (n - az + 2.0) / 2.0
    out = np.where(az <= n, 1.0, np.where(az >= n + 2.0, 0.0, ramp))
    return out if out.ndim else float(out)


def truncate_driver(model: ModelSpec, level) -> ModelSpec:
    """Replace the driver f(t, x, y, z) by f(t, x, y, clamp(z)).

    The result certifies a global z-Lipschitz constant M (3 + 2 n): the clamp
    is 1-Lipschitz and bounded by n + 1, so the quadratic-growth modulus
    M (1 + |z| + |z'|) |z - z'| collapses to M (1 + 2 (n + 1)) |z - z'|.
    Driver gradients, when present, are composed by the chain rule.
    """
    n = _check_level(level)
    base_f = model.f

    def f_trunc(t, x, y, z):
        return base_f(t, x, y, smooth_clamp(n, z))

    changes = {
        "name": f"{model.name}_n{n:g}",
        "f": f_trunc,
        "driver_z_lipschitz": model.growth_M * (3.0 + 2.0 * n),
        "meta": {**model.meta, "truncation_level": n},
    }
    if model.f_x is not None:
        base_fx = model.f_x
        changes["f_x"] = lambda t, x, y, z: base_fx(t, x, y, smooth_clamp(n, z))
    if model.f_y is not None:
        base_fy = model.f_y
        changes["f_y"] = lambda t, x, y, z: base_fy(t, x, y, smooth_clamp(n, z))
    if model.f_z is not None:
        base_fz = model.f_z
        changes["f_z"] = lambda t, x, y, z: (
            base_fz(t, x, y, smooth_clamp(n, z)) * smooth_clamp_grad(n, z))
    return model.with_driver(**changes)
