"""Augmented complex Kalman filter.

The filter runs on a strictly linear complex state-space model.  Noise is
described by (covariance, pseudocovariance) pairs, so improper (non-circular)
noise is handled exactly.  Only the state vector x is tracked; its conjugate
is implied, and the measurement update applies the top block row (G11, G12)
of the augmented gain to the innovation and its conjugate.  The error
covariance recursion is carried in full augmented form and re-projected onto
its (gamma, c) blocks after every step.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, get_lapack_funcs

from .augmented import AugmentedCovariance, assemble_block
from .errors import NumericalError, ShapeError, ValidationError

# Regularize the innovation covariance when its condition estimate exceeds this.
CONDITION_LIMIT = 1e12


@dataclass(frozen=True)
class StateSpaceModel:
    """Linear complex model x' = F x + w, y = H x + n.

    ``f`` may be None, meaning an identity transition (the load-current model:
    states follow a random walk driven by white increments).  ``joseph``
    switches the covariance update to the Joseph form for robustness
    experiments; the default is the plain subtractive form.
    """

    h: np.ndarray
    q: AugmentedCovariance
    r: AugmentedCovariance
    f: np.ndarray | None = None
    joseph: bool = False

    def __post_init__(self):
        h = np.asarray(self.h, dtype=complex)
        if h.ndim != 2:
            raise ShapeError(f"h must be a matrix, got shape {h.shape}")
        object.__setattr__(self, "h", h)
        m, n = h.shape
        if self.q.n != n:
            raise ShapeError(f"q has dimension {self.q.n}, state dimension is {n}")
        if self.r.n != m:
            raise ShapeError(f"r has dimension {self.r.n}, measurement dimension is {m}")
        if self.f is not None:
            f = np.asarray(self.f, dtype=complex)
            if f.shape != (n, n):
                raise ShapeError(f"f must be ({n}, {n}), got {f.shape}")
            object.__setattr__(self, "f", f)

    @property
    def state_dim(self) -> int:
        return self.h.shape[1]

    @property
    def measurement_dim(self) -> int:
        return self.h.shape[0]


@dataclass(frozen=True)
class FilterState:
    """State estimate and augmented error covariance at one time index."""

    x_hat: np.ndarray
    p: AugmentedCovariance
    step: int = 0


@dataclass(frozen=True)
class GainBlocks:
    """Top block row of the augmented Kalman gain.

    ``g11`` multiplies the innovation, ``g12`` its conjugate.  ``regularized``
    reports that the innovation covariance needed a diagonal bump.
    """

    g11: np.ndarray
    g12: np.ndarray
    regularized: bool = False


def init(x0, p0: AugmentedCovariance) -> FilterState:
    """Initial filter state; rejects covariances with negative spectrum."""
    x0 = np.asarray(x0, dtype=complex)
    if x0.ndim != 1 or x0.shape[0] != p0.n:
        raise ShapeError(f"x0 has shape {x0.shape}, covariance dimension is {p0.n}")
    if not p0.spectrum_ok():
        raise ValidationError("initial covariance has a negative eigenvalue")
    return FilterState(x_hat=x0, p=p0, step=0)


def _congruence(mat: np.ndarray, cov: AugmentedCovariance) -> tuple[np.ndarray, np.ndarray]:
    # Blocks of diag(M, M*) P^a diag(M, M*)^H: the augmented structure is
    # closed under this product, so only the top row blocks are computed.
    gamma = mat @ cov.gamma @ mat.conj().T
    c = mat @ cov.c @ mat.T
    return gamma, c


def predict(state: FilterState, model: StateSpaceModel) -> FilterState:
    """Time update: propagate the state and add process noise."""
    if model.f is None:
        x = state.x_hat
        gamma = state.p.gamma + model.q.gamma
        c = state.p.c + model.q.c
    else:
        x = model.f @ state.x_hat
        gamma, c = _congruence(model.f, state.p)
        gamma = gamma + model.q.gamma
        c = c + model.q.c
    return FilterState(x_hat=x, p=AugmentedCovariance(gamma, c), step=state.step + 1)


def _innovation_covariance(state: FilterState, model: StateSpaceModel,
                           r: AugmentedCovariance) -> np.ndarray:
    gamma_s, c_s = _congruence(model.h, state.p)
    s = assemble_block(AugmentedCovariance(gamma_s + r.gamma, c_s + r.c))
    # Hermitize exactly; accumulated roundoff would otherwise upset pocon.
    return 0.5 * (s + s.conj().T)


def _factor_spd(s: np.ndarray):
    """Cholesky factor plus a cheap reciprocal-condition estimate."""
    factor = cho_factor(s, lower=True, check_finite=False)
    (pocon,) = get_lapack_funcs(("pocon",), (s,))
    rcond, info = pocon(factor[0], np.linalg.norm(s, 1), uplo="L")
    if info != 0:
        raise NumericalError("condition estimation failed")
    return factor, float(rcond)


def gain(state: FilterState, model: StateSpaceModel,
         r: AugmentedCovariance | None = None) -> GainBlocks:
    """Augmented Kalman gain for the predicted state; returns (G11, G12).

    The full 2m x 2m innovation covariance is solved against; when it is
    numerically singular or its condition estimate exceeds CONDITION_LIMIT,
    a scaled identity is added once and the result is flagged.
    """
    r = model.r if r is None else r
    s = _innovation_covariance(state, model, r)
    regularized = False
    try:
        factor, rcond = _factor_spd(s)
        if not np.isfinite(rcond) or rcond < 1.0 / CONDITION_LIMIT:
            raise LinAlgError("ill conditioned")
    except (LinAlgError, np.linalg.LinAlgError):
        m = model.measurement_dim
        eps = 1e-12 * max(np.trace(s).real, 0.0) / m
        if eps <= 0.0:
            eps = np.finfo(float).tiny
        s = s + eps * np.eye(2 * m)
        regularized = True
        try:
            factor, _ = _factor_spd(s)
        except (LinAlgError, np.linalg.LinAlgError) as exc:
            raise NumericalError("innovation covariance is singular") from exc

    # A = P^a H^aH in block form [[A11, A12], [conj(A12), conj(A11)]].
    a11 = state.p.gamma @ model.h.conj().T
    a12 = state.p.c @ model.h.T
    a = np.block([[a11, a12], [a12.conj(), a11.conj()]])
    # G = A S^{-1}; S is Hermitian, so G = (S^{-1} A^H)^H.
    g = cho_solve(factor, a.conj().T, check_finite=False).conj().T
    n = model.state_dim
    m = model.measurement_dim
    return GainBlocks(g11=np.ascontiguousarray(g[:n, :m]),
                      g12=np.ascontiguousarray(g[:n, m:]),
                      regularized=regularized)


def innovation(state: FilterState, y, model: StateSpaceModel) -> np.ndarray:
    """Corrective error y - H x of the predicted state (drives bad-data checks)."""
    y = np.asarray(y, dtype=complex)
    if y.shape != (model.measurement_dim,):
        raise ShapeError(f"measurement has shape {y.shape}, expected ({model.measurement_dim},)")
    return y - model.h @ state.x_hat


def update(state: FilterState, y, model: StateSpaceModel,
           r: AugmentedCovariance | None = None,
           gain_blocks: GainBlocks | None = None) -> FilterState:
    """Measurement update tracking the state vector only.

    The conjugate half of the innovation is formed by conjugation rather than
    carried as extra state, which halves the updated state count without
    changing the estimate.
    """
    r = model.r if r is None else r
    if gain_blocks is None:
        gain_blocks = gain(state, model, r=r)
    nu = innovation(state, y, model)
    x = state.x_hat + gain_blocks.g11 @ nu + gain_blocks.g12 @ nu.conj()

    g11, g12 = gain_blocks.g11, gain_blocks.g12
    m11 = g11 @ model.h
    m12 = g12 @ model.h.conj()
    if model.joseph:
        # P' = J P^a J^H + G^a R^a G^aH with J = I - G^a H^a, assembled densely.
        n = model.state_dim
        j = np.block([[np.eye(n) - m11, -m12], [(-m12).conj(), (np.eye(n) - m11).conj()]])
        g = np.block([[g11, g12], [g12.conj(), g11.conj()]])
        p_full = j @ assemble_block(state.p) @ j.conj().T + g @ assemble_block(r) @ g.conj().T
        gamma = p_full[:n, :n]
        c = p_full[:n, n:]
    else:
        # Top blocks of (I - G^a H^a) P^a.
        i_m11 = np.eye(model.state_dim) - m11
        gamma = i_m11 @ state.p.gamma - m12 @ state.p.c.conj()
        c = i_m11 @ state.p.c - m12 @ state.p.gamma.conj()
    gamma = 0.5 * (gamma + gamma.conj().T)
    c = 0.5 * (c + c.T)
    return FilterState(x_hat=x, p=AugmentedCovariance(gamma, c), step=state.step)
