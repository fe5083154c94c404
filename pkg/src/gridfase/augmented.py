"""Widely linear complex statistics.

Complex random vectors are described by the pair (gamma, c): the covariance
E[(x-mu)(x-mu)^H] and the pseudocovariance E[(x-mu)(x-mu)^T].  Stacking a
vector with its conjugate ("augmenting") turns widely linear operations into
ordinary linear algebra on 2n-dimensional blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

# Relative tolerance for Hermitian / symmetric structure checks.
STRUCTURE_TOL = 1e-9


def _as_complex_vector(x) -> np.ndarray:
    x = np.asarray(x, dtype=complex)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-d complex vector, got shape {x.shape}")
    return x


@dataclass(frozen=True)
class AugmentedVector:
    """A complex vector stacked with its elementwise conjugate."""

    top: np.ndarray
    bottom: np.ndarray

    def stacked(self) -> np.ndarray:
        """Return the 2n vector [top; bottom]."""
        return np.concatenate([self.top, self.bottom])

    @property
    def dim(self) -> int:
        return self.top.shape[0]


def augment(x) -> AugmentedVector:
    """Embed a complex vector as [x; conj(x)]."""
    top = _as_complex_vector(x)
    return AugmentedVector(top=top, bottom=np.conj(top))


class AugmentedCovariance:
    """Covariance gamma plus pseudocovariance c of a complex random vector.

    The assembled 2n x 2n block form is [[gamma, c], [conj(c), conj(gamma)]].
    gamma must be Hermitian (positive semidefinite up to numerical noise) and
    c symmetric; the constructor rejects inputs that break either structure
    beyond a small relative tolerance.
    """

    __slots__ = ("gamma", "c", "n")

    def __init__(self, gamma, c=None):
        gamma = np.asarray(gamma, dtype=complex)
        if gamma.ndim != 2 or gamma.shape[0] != gamma.shape[1]:
            raise ShapeError(f"gamma must be square, got shape {gamma.shape}")
        n = gamma.shape[0]
        if c is None:
            c = np.zeros((n, n), dtype=complex)
        else:
            c = np.asarray(c, dtype=complex)
        if c.shape != (n, n):
            raise ShapeError(f"c must match gamma shape {(n, n)}, got {c.shape}")

        scale = max(np.linalg.norm(gamma), 1.0)
        if np.linalg.norm(gamma - gamma.conj().T) > STRUCTURE_TOL * scale:
            raise ValidationError("gamma is not Hermitian within tolerance")
        if np.linalg.norm(c - c.T) > STRUCTURE_TOL * max(np.linalg.norm(c), 1.0):
            raise ValidationError("c is not symmetric within tolerance")

        # Re-symmetrize exactly so assembled blocks are Hermitian to the bit.
        gamma = 0.5 * (gamma + gamma.conj().T)
        c = 0.5 * (c + c.T)
        self.gamma = gamma
        self.c = c
        self.n = n

    @classmethod
    def zero(cls, n: int) -> "AugmentedCovariance":
        return cls(np.zeros((n, n), dtype=complex))

    @classmethod
    def from_variances(cls, variances, pseudo=None) -> "AugmentedCovariance":
        """Diagonal covariance from per-element variances (and optional
        per-element pseudocovariance diagonal)."""
        v = np.atleast_1d(np.asarray(variances, dtype=float))
        gamma = np.diag(v.astype(complex))
        c = None if pseudo is None else np.diag(np.asarray(pseudo, dtype=complex))
        return cls(gamma, c)

    def min_eigenvalue(self) -> float:
        return float(np.linalg.eigvalsh(self.gamma).min())

    def spectrum_ok(self, rel: float = 1e-10) -> bool:
        """True if gamma's smallest eigenvalue is above -rel * trace/n."""
        floor = -rel * max(abs(np.trace(self.gamma).real) / self.n, 1e-300)
        return self.min_eigenvalue() >= floor

    def scaled(self, factor: float) -> "AugmentedCovariance":
        return AugmentedCovariance(self.gamma * factor, self.c * factor)

    def __repr__(self):
        return f"AugmentedCovariance(n={self.n})"


def assemble_block(cov: AugmentedCovariance) -> np.ndarray:
    """Assemble [[gamma, c], [conj(c), conj(gamma)]] for a covariance pair."""
    top = np.hstack([cov.gamma, cov.c])
    bottom = np.hstack([cov.c.conj(), cov.gamma.conj()])
    return np.vstack([top, bottom])


def floor_psd(matrix: np.ndarray) -> np.ndarray:
    """Symmetrize a Hermitian-intended matrix and clip negative eigenvalues."""
    sym = 0.5 * (matrix + matrix.conj().T)
    w, v = np.linalg.eigh(sym)
    if w.min() >= 0.0:
        return sym
    w = np.clip(w, 0.0, None)
    return (v * w) @ v.conj().T


def estimate_noise_covariance(samples) -> AugmentedCovariance:
    """Estimate (gamma, c) from sample vectors.

    The sample mean is removed first; gamma is floored to be positive
    semidefinite and c symmetrized, so the result always satisfies the
    AugmentedCovariance invariants.
    """
    arr = np.asarray(samples, dtype=complex)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2 or arr.shape[0] < 2:
        raise ValidationError("need at least two equally sized sample vectors")
    centered = arr - arr.mean(axis=0, keepdims=True)
    count = arr.shape[0]
    gamma = centered.T @ centered.conj() / count
    c = centered.T @ centered / count
    gamma = floor_psd(gamma)
    c = 0.5 * (c + c.T)
    return AugmentedCovariance(gamma, c)
