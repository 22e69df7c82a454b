"""Spectral transform of pooled SPD matrices.

Forward path: eigendecompose H, L2-normalize the eigenvalue vector, apply
the learnable mixture-of-power function f(x) = sum_i gamma_i x**alpha_i
(gamma = softmax of logits, alpha_i = i/N_m), reconstruct, and vectorize
the upper triangle. Backward reaches only the mixture logits: the
eigenvectors and normalized eigenvalues are treated as constants.

The gradient scatter of the upper-triangle vectorization is symmetric
fill with off-diagonals halved; the finite-difference check pins this
convention (see GRAD_OFFDIAG_FACTOR).
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import DataError
from .pooling import PooledSPD

DEFAULT_N_MIX = 10
DEFAULT_LOG_EPS = 1e-3

# off-diagonal factor of the symmetric gradient scatter; 0.5 passes the
# end-to-end finite-difference check, 1.0 (the corrupt variant) fails it
GRAD_OFFDIAG_FACTOR = 0.5

FIXED_TRANSFORMS = ("log_e", "log_reg", "log_max", "half_power",
                    "l2_norm", "ssn")


def softmax(x):
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def power_grid(n_mix):
    """Exponents alpha_i = i/N_m for i = 0..N_m."""
    if n_mix < 1:
        raise DataError(f"need n_mix >= 1, got {n_mix}")
    return np.arange(n_mix + 1) / float(n_mix)


@dataclass
class MPFParams:
    """Mixture logits omega; weights are softmax(omega) on the simplex."""

    omega: np.ndarray

    def __post_init__(self):
        self.omega = np.ascontiguousarray(self.omega, dtype=np.float64)
        if self.omega.ndim != 1 or len(self.omega) < 2:
            raise DataError("omega must be a vector of length >= 2")
        if not np.all(np.isfinite(self.omega)):
            raise DataError("non-finite mixture logits")

    @classmethod
    def init(cls, n_mix=DEFAULT_N_MIX):
        """Zero logits: the uniform mixture."""
        return cls(np.zeros(n_mix + 1))

    @property
    def n_mix(self):
        return len(self.omega) - 1

    @property
    def alphas(self):
        return power_grid(self.n_mix)

    def gamma(self):
        return softmax(self.omega)


@dataclass
class SpdmtCache:
    """Constants retained by the forward pass for the backward pass."""

    U: np.ndarray        # (d, d) eigenvectors, columns
    lam: np.ndarray      # (d,) normalized eigenvalues, descending
    gamma: np.ndarray    # (n_mix+1,) mixture weights
    powers: np.ndarray   # (d, n_mix+1), powers[k, i] = lam[k] ** alpha_i

    @property
    def dim(self):
        return self.U.shape[0]

    def validate(self):
        d = self.dim
        if np.max(np.abs(self.U.T @ self.U - np.eye(d))) > 1e-8:
            raise DataError("eigenvector matrix is not orthogonal")
        if abs(np.linalg.norm(self.lam) - 1.0) > 1e-12:
            raise DataError("eigenvalue vector is not unit length")
        if np.any(self.lam < 0.0) or np.any(np.diff(self.lam) > 0.0):
            raise DataError("eigenvalues must be non-negative descending")


def _as_matrix(H):
    return H.H if isinstance(H, PooledSPD) else np.asarray(H, dtype=np.float64)


def eig_sym(H):
    """Eigendecomposition of a symmetric PSD matrix, descending order.

    Negative round-off eigenvalues are clamped to 0. Diagonal input keeps
    the identity eigenvector convention (up to column sign).
    """
    mat = _as_matrix(H)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise DataError(f"expected a square matrix, got shape {mat.shape}")
    asym = np.max(np.abs(mat - mat.T)) if mat.size else 0.0
    if asym > 1e-10 * max(1.0, np.max(np.abs(mat))):
        raise DataError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    evals, evecs = scipy.linalg.eigh(0.5 * (mat + mat.T))
    order = slice(None, None, -1)
    return np.ascontiguousarray(evecs[:, order]), \
        np.maximum(evals[order], 0.0)


def g_vec(mat):
    """Upper triangle of a symmetric matrix, row-major."""
    return mat[np.triu_indices(mat.shape[0])]


def g_dim(d):
    return d * (d + 1) // 2


def g_inv_scatter(vec, d, offdiag_factor=GRAD_OFFDIAG_FACTOR):
    """Scatter an upper-triangle gradient into a symmetric matrix.

    Diagonal slots receive their entry once; each off-diagonal entry is
    placed in both mirror slots scaled by ``offdiag_factor``.
    """
    if len(vec) != g_dim(d):
        raise DataError(f"gradient length {len(vec)} != {g_dim(d)}")
    s = np.zeros((d, d))
    s[np.triu_indices(d)] = vec
    diag = np.diag(np.diag(s))
    off = s - diag
    return diag + offdiag_factor * (off + off.T)


def offdiag_slots(d):
    """Boolean mask over upper-triangle slots marking off-diagonal entries."""
    i, j = np.triu_indices(d)
    return i != j


def mpf_eval(gamma, x):
    """f(x) = sum_i gamma_i x**alpha_i with the convention 0**0 = 1.

    ``gamma`` must lie on the simplex; then f(1) = sum(gamma) = 1 and
    f(0) = gamma[0].
    """
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim != 1 or len(gamma) < 2:
        raise DataError("gamma must be a vector of length >= 2")
    x = float(x)
    if x < 0.0:
        raise DataError(f"mixture of powers is defined on x >= 0, got {x}")
    return float(np.sum(gamma * x ** power_grid(len(gamma) - 1)))


def normalized_spectrum(H):
    """(U, lam) with lam the unit-norm clamped eigenvalue vector."""
    U, raw = eig_sym(H)
    norm = np.linalg.norm(raw)
    if norm == 0.0:
        raise DataError("all-zero matrix: spectrum cannot be normalized")
    return U, raw / norm


def spdmt_forward(H, params):
    """Transform H and return (upper-triangle vector, backward cache)."""
    U, lam = normalized_spectrum(H)
    powers = lam[:, None] ** params.alphas[None, :]
    gamma = params.gamma()
    fvals = powers @ gamma
    recon = (U * fvals) @ U.T
    return g_vec(recon), SpdmtCache(U, lam, gamma, powers)


def spdmt_backward(cache, dL_dgH, corrupt_scatter=False):
    """Gradient of a scalar loss w.r.t. the mixture logits.

    Chain: scatter the upper-triangle gradient symmetrically (off-diagonals
    halved), rotate into the eigenbasis and take its diagonal, contract
    with the power table, then project through the softmax.
    """
    dL_dgH = np.asarray(dL_dgH, dtype=np.float64)
    d = cache.dim
    if len(dL_dgH) != g_dim(d):
        raise DataError(f"gradient length {len(dL_dgH)} != {g_dim(d)}")
    factor = 1.0 if corrupt_scatter else GRAD_OFFDIAG_FACTOR
    s = g_inv_scatter(dL_dgH, d, factor)
    dlam_prime = np.einsum("jk,jk->k", cache.U, s @ cache.U)
    dgamma = cache.powers.T @ dlam_prime
    return softmax_backward(cache.gamma, dgamma)


def softmax_backward(gamma, dgamma):
    """Pull a gradient on the weights back to the logits."""
    return gamma * (dgamma - np.dot(gamma, dgamma))


def mpf_q_matrix(U, powers):
    """Per-shape factor Q with columns g(U diag(powers[:, i]) U^T).

    The transformed vector is Q @ gamma, and (with the halved off-diagonal
    scatter) the weight gradient is Q^T @ dL_dgH, which makes per-batch
    work independent of the d^3 reconstruction cost.
    """
    d, m = powers.shape
    q = np.empty((g_dim(d), m))
    iu = np.triu_indices(d)
    for i in range(m):
        b = (U * powers[:, i]) @ U.T
        q[:, i] = b[iu]
    return q


def q_backward_matrix(q, d, corrupt_scatter=False):
    """Backward variant of Q; identical to Q for the canonical scatter.

    The corrupt variant doubles the off-diagonal rows, reproducing the
    unhalved scatter that the finite-difference check must reject.
    """
    if not corrupt_scatter:
        return q
    qb = q.copy()
    qb[offdiag_slots(d)] *= 2.0
    return qb


def fixed_transform(H, kind, eps=DEFAULT_LOG_EPS):
    """Non-learned transform baselines.

    The first four kinds map the normalized spectrum entrywise and
    reconstruct: log; log(x + eps); log(max(x, eps)); sqrt(x). The last
    two act on the raw upper-triangle vector: L2 normalization, and
    signed square root followed by L2 normalization.
    """
    if kind not in FIXED_TRANSFORMS:
        raise DataError(f"unknown transform {kind!r}; "
                        f"choose from {FIXED_TRANSFORMS}")
    mat = _as_matrix(H)
    if kind == "l2_norm" or kind == "ssn":
        gv = g_vec(mat)
        if kind == "ssn":
            gv = np.sign(gv) * np.sqrt(np.abs(gv))
        norm = np.linalg.norm(gv)
        if norm == 0.0:
            raise DataError("all-zero matrix cannot be normalized")
        return gv / norm

    U, lam = normalized_spectrum(mat)
    if kind == "log_e":
        if np.any(lam == 0.0):
            raise DataError("log transform undefined: zero eigenvalue "
                            "(use log_reg or log_max)")
        mapped = np.log(lam)
    elif kind == "log_reg":
        if eps <= 0:
            raise DataError(f"eps must be positive, got {eps}")
        mapped = np.log(lam + eps)
    elif kind == "log_max":
        if eps <= 0:
            raise DataError(f"eps must be positive, got {eps}")
        mapped = np.log(np.maximum(lam, eps))
    else:
        mapped = np.sqrt(lam)
    return g_vec((U * mapped) @ U.T)
