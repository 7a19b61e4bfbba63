"""Dense-tensor substrate: 2-D DFT pairs and small complex linear algebra.

Tensors are plain ``numpy.ndarray`` objects in ``float64`` / ``complex128``.
The DFT convention used throughout the package is the unnormalized forward
transform with a 1/(H*W) inverse, so Parseval reads
``sum|X_hat|^2 = H*W * sum|x|^2``.  The convention is recorded in every
checkpoint header (see :mod:`oiqa.dataio`).
"""

import numpy as np

from .errors import InversionError, NumericalError, ShapeError, SizeError, SymmetryError

#: max |imag| tolerated (and discarded) by idft2
IMAG_RESIDUE_TOL = 1e-8

#: condition-number ceiling for cinv
COND_LIMIT = 1e12

#: hard cap on svd_small dimensions
SVD_DIM_CAP = 4096

_JACOBI_MAX_SWEEPS = 100
_JACOBI_OFF_TOL = 1e-12


def check_finite(a, what="tensor"):
    """Reject NaN/Inf at module boundaries."""
    a = np.asarray(a)
    if not np.all(np.isfinite(a)):
        raise NumericalError(f"{what} contains NaN or Inf")
    return a


def dft2(x):
    """Unnormalized forward 2-D DFT of a real C x H x W tensor, per channel."""
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating) and not np.issubdtype(x.dtype, np.integer):
        raise TypeError(f"dft2 expects a real tensor, got dtype {x.dtype}")
    if x.ndim != 3:
        raise ShapeError(f"dft2 expects C x H x W, got shape {x.shape}")
    check_finite(x, "dft2 input")
    return np.fft.fft2(x.astype(np.float64, copy=False), axes=(-2, -1))


def idft2(x_hat):
    """Real inverse 2-D DFT.

    The input must be conjugate-symmetric; an imaginary residue of at least
    ``IMAG_RESIDUE_TOL`` after the inverse transform raises
    :class:`SymmetryError`, smaller residue is discarded.
    """
    x_hat = np.asarray(x_hat, dtype=np.complex128)
    if x_hat.ndim != 3:
        raise ShapeError(f"idft2 expects C x H x W, got shape {x_hat.shape}")
    check_finite(x_hat, "idft2 input")
    y = np.fft.ifft2(x_hat, axes=(-2, -1))
    residue = float(np.max(np.abs(y.imag))) if y.size else 0.0
    if residue >= IMAG_RESIDUE_TOL:
        raise SymmetryError(
            f"inverse DFT imaginary residue {residue:.3e} >= {IMAG_RESIDUE_TOL:.0e}; "
            "input is not conjugate-symmetric"
        )
    return np.ascontiguousarray(y.real)


def cinv(m):
    """Inverse of a square, well-conditioned complex matrix.

    Raises :class:`InversionError` with the condition estimate when the
    estimate reaches ``COND_LIMIT`` (or the matrix is outright singular).
    """
    m = np.asarray(m, dtype=np.complex128)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"cinv expects a square matrix, got shape {m.shape}")
    check_finite(m, "cinv input")
    cond = float(np.linalg.cond(m))
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        raise InversionError("matrix is singular or ill-conditioned", condition=cond)
    return np.linalg.inv(m)


def _jacobi_rotate(a, v, i, j, c, s, phase):
    """Apply the complex column rotation [a_i, a_j] <- [a_i, a_j] @ J in place,
    with J = [[c, s], [-s*phase, c*phase]] and phase = conj(gamma)/|gamma|."""
    ai = a[:, i].copy()
    aj = a[:, j]
    a[:, i] = c * ai - s * phase * aj
    a[:, j] = s * ai + c * phase * aj
    vi = v[:, i].copy()
    vj = v[:, j]
    v[:, i] = c * vi - s * phase * vj
    v[:, j] = s * vi + c * phase * vj


def _one_sided_jacobi(a):
    """One-sided Jacobi on the columns of a tall matrix.

    Returns (a_rot, v) with a_rot = a @ v having orthogonal columns; the
    column norms of a_rot are the singular values.
    """
    a = a.astype(np.complex128, copy=True)
    n = a.shape[1]
    v = np.eye(n, dtype=np.complex128)
    for _ in range(_JACOBI_MAX_SWEEPS):
        converged = True
        for i in range(n - 1):
            for j in range(i + 1, n):
                ai = a[:, i]
                aj = a[:, j]
                gamma = np.vdot(ai, aj)
                alpha = np.vdot(ai, ai).real
                beta = np.vdot(aj, aj).real
                r = abs(gamma)
                if r <= _JACOBI_OFF_TOL * np.sqrt(alpha * beta) or r == 0.0:
                    continue
                converged = False
                phase = np.conj(gamma) / r
                tau = (beta - alpha) / (2.0 * r)
                if tau >= 0.0:
                    t = 1.0 / (tau + np.sqrt(1.0 + tau * tau))
                else:
                    t = 1.0 / (tau - np.sqrt(1.0 + tau * tau))
                c = 1.0 / np.sqrt(1.0 + t * t)
                _jacobi_rotate(a, v, i, j, c, c * t, phase)
        if converged:
            return a, v
    raise NumericalError(f"one-sided Jacobi did not converge in {_JACOBI_MAX_SWEEPS} sweeps")


def _complete_orthonormal(cols, dim, count):
    """Extend the orthonormal columns in `cols` to `count` columns by
    Gram-Schmidt against the canonical basis (rank-deficient fallback)."""
    have = cols.shape[1]
    out = np.zeros((dim, count), dtype=cols.dtype)
    out[:, :have] = cols
    k = have
    for e in range(dim):
        if k >= count:
            break
        cand = np.zeros(dim, dtype=cols.dtype)
        cand[e] = 1.0
        cand = cand - out[:, :k] @ (out[:, :k].conj().T @ cand)
        nrm = np.linalg.norm(cand)
        if nrm > 1e-8:
            out[:, k] = cand / nrm
            k += 1
    return out


def svd_small(m):
    """Singular values (descending) and right singular vectors of a small matrix.

    Implemented with one-sided Jacobi rotations (cap ``_JACOBI_MAX_SWEEPS``
    sweeps, relative off-diagonal threshold ``_JACOBI_OFF_TOL``).  Returns
    ``(s, v)`` where ``v[:, k]`` is the right singular vector for ``s[k]``,
    so ``m @ v[:, k]`` has norm ``s[k]``.  For real input ``v`` is real.
    """
    m = np.asarray(m)
    if m.ndim != 2:
        raise ShapeError(f"svd_small expects a matrix, got shape {m.shape}")
    rows, cols = m.shape
    if rows > SVD_DIM_CAP or cols > SVD_DIM_CAP:
        raise SizeError(f"svd_small capped at {SVD_DIM_CAP}, got {rows} x {cols}")
    check_finite(m, "svd_small input")
    real_input = not np.iscomplexobj(m)

    if rows >= cols:
        a_rot, v = _one_sided_jacobi(m)
        s = np.linalg.norm(a_rot, axis=0)
    else:
        # Factor the tall conjugate transpose: m^H = u s v^H  =>  m = v s u^H,
        # so the right singular vectors of m are the (normalized) columns
        # of m^H after rotation.
        a_rot, _ = _one_sided_jacobi(m.conj().T)
        s = np.linalg.norm(a_rot, axis=0)
        v = np.zeros_like(a_rot)
        smax = float(np.max(s)) if s.size else 0.0
        good = s > max(smax, 1.0) * 1e-13 if smax > 0 else np.zeros(len(s), dtype=bool)
        v[:, good] = a_rot[:, good] / s[good]
        if not np.all(good):
            filled = _complete_orthonormal(v[:, good], a_rot.shape[0], a_rot.shape[1])
            order_good = np.flatnonzero(good)
            order_bad = np.flatnonzero(~good)
            v[:, order_good] = filled[:, : len(order_good)]
            v[:, order_bad] = filled[:, len(order_good):]

    order = np.argsort(-s, kind="stable")
    s = np.ascontiguousarray(s[order])
    v = np.ascontiguousarray(v[:, order])
    if real_input:
        v = np.ascontiguousarray(v.real)
    return s, v


def spectral_norm(m):
    """Largest singular value of a small matrix."""
    s, _ = svd_small(m)
    return float(s[0]) if len(s) else 0.0
