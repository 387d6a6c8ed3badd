"""Least-squares conditional expectation estimators.

Two basis families:

- global_polynomial: multivariate monomials up to a total degree, evaluated
  on coordinates affinely rescaled to [-1, 1] using the step bounds (raw
  monomials on unscaled data condition terribly).
- local_partition: hypercube cells over the step bounds, constant or affine
  fit per cell. Points outside the bounds land in the nearest edge cell.

Bounds default to per-step empirical quantiles of the state. Normal equations
get a ridge of ridge_scale * trace; the unridged condition number is checked
against condition_cap. For the global basis a cap violation raises
DegenerateRegression (the whole step is unusable); for the local basis a bad
or underpopulated cell falls back to the cell mean (and an empty cell to the
global mean), and only a step where every cell failed raises.

All reductions run over fixed-size path blocks combined in a fixed pairwise
tree, so results do not depend on how work is scheduled.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateRegression, InvalidParameters

_BLOCK = 65536
_SPREAD_ATOL = 1e-12


@dataclass(frozen=True)
class RegressionBasis:
    kind: str = "local_partition"
    degree: int = 1
    cells_per_dim: int = 50
    bounds: np.ndarray | None = None
    lower_quantile: float = 0.001
    upper_quantile: float = 0.999
    ridge_scale: float = 1e-10
    condition_cap: float = 1e12

    def __post_init__(self):
        if self.kind not in ("local_partition", "global_polynomial"):
            raise InvalidParameters(f"unknown basis kind {self.kind!r}")
        if self.degree < 0:
            raise InvalidParameters(f"degree must be >= 0, got {self.degree}")
        if self.kind == "local_partition" and self.degree > 1:
            raise InvalidParameters(
                f"local_partition supports degree 0 or 1, got {self.degree}")
        if self.cells_per_dim < 1:
            raise InvalidParameters(f"cells_per_dim must be >= 1, got {self.cells_per_dim}")
        if not 0.0 <= self.lower_quantile < self.upper_quantile <= 1.0:
            raise InvalidParameters("quantiles must satisfy 0 <= lo < hi <= 1")

    def describe(self) -> str:
        if self.kind == "global_polynomial":
            return f"global_polynomial(degree={self.degree})"
        return f"local_partition(cells={self.cells_per_dim}, degree={self.degree})"


@dataclass
class FitInfo:
    condition: float
    residual_rms: np.ndarray
    n_features: int
    fallback_cells: int = 0
    degenerate: bool = False


def _tree_sum(parts):
    """Sum a list of equally-shaped arrays in a fixed pairwise order."""
    parts = list(parts)
    if not parts:
        raise InvalidParameters("nothing to sum")
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] if i + 1 < len(parts) else parts[i]
               for i in range(0, len(parts), 2)]
        parts = nxt
    return parts[0]


def _blocked_crossprods(phi, targets):
    spans = [(a, min(a + _BLOCK, phi.shape[0])) for a in range(0, phi.shape[0], _BLOCK)]
    G = _tree_sum([phi[a:b].T @ phi[a:b] for a, b in spans])
    R = _tree_sum([phi[a:b].T @ targets[a:b] for a, b in spans])
    return G, R


def step_bounds(basis: RegressionBasis, x: np.ndarray) -> np.ndarray:
    """Per-dimension (lo, hi) bounds, configured or empirical quantiles."""
    if basis.bounds is not None:
        bounds = np.asarray(basis.bounds, dtype=np.float64)
        if bounds.shape != (x.shape[1], 2):
            raise InvalidParameters(
                f"bounds must have shape ({x.shape[1]}, 2), got {bounds.shape}")
        if np.any(bounds[:, 1] <= bounds[:, 0]):
            raise InvalidParameters("bounds must have hi > lo in every dimension")
        return bounds
    q = np.quantile(x, [basis.lower_quantile, basis.upper_quantile], axis=0)
    return q.T.copy()


def _monomial_powers(m, degree):
    pows = [e for e in itertools.product(range(degree + 1), repeat=m)
            if sum(e) <= degree]
    pows.sort(key=lambda e: (sum(e), e))
    return pows


def _constant_fit(targets):
    mean = targets.mean(axis=0)
    fitted = np.broadcast_to(mean, targets.shape).copy()
    resid = np.sqrt(np.mean((targets - fitted) ** 2, axis=0))
    return fitted, FitInfo(condition=1.0, residual_rms=resid, n_features=1,
                           degenerate=True)


def _fit_global(basis, x, targets, step):
    bounds = step_bounds(basis, x)
    mid = 0.5 * (bounds[:, 0] + bounds[:, 1])
    half = 0.5 * (bounds[:, 1] - bounds[:, 0])
    u = (x - mid) / half
    pows = _monomial_powers(x.shape[1], basis.degree)
    phi = np.empty((x.shape[0], len(pows)))
    for j, e in enumerate(pows):
        col = np.ones(x.shape[0])
        for dim, p in enumerate(e):
            if p:
                col = col * u[:, dim] ** p
        phi[:, j] = col
    G, R = _blocked_crossprods(phi, targets)
    eig = np.linalg.eigvalsh(G)
    cond = np.inf if eig[0] <= 0 else float(eig[-1] / eig[0])
    if cond > basis.condition_cap:
        raise DegenerateRegression(
            f"normal matrix condition {cond:.3e} exceeds cap {basis.condition_cap:.3e} "
            f"for {basis.describe()}", step=step)
    lam = basis.ridge_scale * float(np.trace(G))
    beta = np.linalg.solve(G + lam * np.eye(G.shape[0]), R)
    fitted = phi @ beta
    resid = np.sqrt(np.mean((targets - fitted) ** 2, axis=0))
    return fitted, FitInfo(condition=cond, residual_rms=resid, n_features=len(pows))


def _fit_local(basis, x, targets, step):
    P, m = x.shape
    k = targets.shape[1]
    nc = basis.cells_per_dim
    bounds = step_bounds(basis, x)
    width = (bounds[:, 1] - bounds[:, 0]) / nc
    idx = np.clip(((x - bounds[:, 0]) / width).astype(np.int64), 0, nc - 1)
    flat = idx[:, 0]
    for dim in range(1, m):
        flat = flat * nc + idx[:, dim]
    n_cells = nc ** m
    counts = np.bincount(flat, minlength=n_cells)

    centers = bounds[:, 0] + width * (np.stack(
        np.meshgrid(*[np.arange(nc)] * m, indexing="ij"), axis=-1)
        .reshape(n_cells, m) + 0.5)
    halfw = 0.5 * width
    u = (x - centers[flat]) / halfw  # cell-local coordinates in [-1, 1]

    if basis.degree == 0:
        sums = np.stack([np.bincount(flat, weights=targets[:, j], minlength=n_cells)
                         for j in range(k)], axis=1)
        means = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None],
                         targets.mean(axis=0))
        fitted = means[flat]
        resid = np.sqrt(np.mean((targets - fitted) ** 2, axis=0))
        info = FitInfo(condition=1.0, residual_rms=resid, n_features=n_cells,
                       fallback_cells=int((counts == 0).sum()))
        return fitted, info

    nf = 1 + m
    G = np.zeros((n_cells, nf, nf))
    R = np.zeros((n_cells, nf, k))
    G[:, 0, 0] = counts
    for a in range(m):
        sa = np.bincount(flat, weights=u[:, a], minlength=n_cells)
        G[:, 0, a + 1] = G[:, a + 1, 0] = sa
        for b2 in range(a, m):
            sab = np.bincount(flat, weights=u[:, a] * u[:, b2], minlength=n_cells)
            G[:, a + 1, b2 + 1] = G[:, b2 + 1, a + 1] = sab
    for j in range(k):
        R[:, 0, j] = np.bincount(flat, weights=targets[:, j], minlength=n_cells)
        for a in range(m):
            R[:, a + 1, j] = np.bincount(flat, weights=u[:, a] * targets[:, j],
                                         minlength=n_cells)

    eig = np.linalg.eigvalsh(G)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.where(eig[:, 0] > 0, eig[:, -1] / np.maximum(eig[:, 0], 1e-300), np.inf)
    usable = (counts >= nf + 1) & (cond <= basis.condition_cap)
    coefs = np.zeros((n_cells, nf, k))
    if usable.any():
        Gu = G[usable]
        lam = basis.ridge_scale * np.trace(Gu, axis1=1, axis2=2)
        Gu = Gu + lam[:, None, None] * np.eye(nf)
        coefs[usable] = np.linalg.solve(Gu, R[usable])
    # underpopulated or ill-conditioned cells keep the cell mean; empty cells
    # fall back to the global mean so off-sample queries stay defined
    fallback = ~usable & (counts > 0)
    if fallback.any():
        coefs[fallback, 0, :] = R[fallback, 0, :] / counts[fallback, None]
    empty = counts == 0
    if empty.any():
        coefs[empty, 0, :] = targets.mean(axis=0)
    if not usable.any() and basis.degree == 1:
        raise DegenerateRegression(
            f"every cell of {basis.describe()} fell back at this step", step=step)

    fitted = coefs[flat, 0, :] + np.einsum("pa,pak->pk", u, coefs[flat, 1:, :])
    resid = np.sqrt(np.mean((targets - fitted) ** 2, axis=0))
    finite_cond = cond[np.isfinite(cond)]
    info = FitInfo(condition=float(finite_cond.max()) if finite_cond.size else np.inf,
                   residual_rms=resid, n_features=n_cells * nf,
                   fallback_cells=int((fallback | empty).sum()))
    return fitted, info


def fit_step(basis: RegressionBasis, x: np.ndarray, targets: np.ndarray,
             step: int | None = None):
    """Fit all target columns on the state x; returns (fitted, FitInfo).

    fitted[p, j] estimates E[targets[., j] | x_p]. A state with (numerically)
    no spread in any dimension gets a constant fit, which is the correct
    conditional expectation at a deterministic node such as t = 0.
    """
    x = np.asarray(x, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or targets.ndim != 2 or x.shape[0] != targets.shape[0]:
        raise InvalidParameters(
            f"x must be (P, m) and targets (P, k), got {x.shape} and {targets.shape}")
    spread = x.max(axis=0) - x.min(axis=0)
    scale = np.maximum(1.0, np.abs(x).max(axis=0))
    if np.all(spread <= _SPREAD_ATOL * scale):
        return _constant_fit(targets)
    if basis.kind == "global_polynomial":
        return _fit_global(basis, x, targets, step)
    return _fit_local(basis, x, targets, step)
