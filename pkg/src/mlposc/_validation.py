"""Input validation helpers shared by the model, solvers and estimators."""
import numpy as np


class ProblemError(ValueError):
    """Raised when a control problem is malformed or ill-posed."""


def as_matrix(value, name, shape=None):
    """Return ``value`` as a 2-D float array, promoting scalars to 1x1."""
    arr = np.atleast_2d(np.asarray(value, dtype=float))
    if arr.ndim != 2:
        raise ProblemError(f"{name} must be a matrix, got ndim={arr.ndim}")
    if shape is not None and arr.shape != tuple(shape):
        raise ProblemError(f"{name} has shape {arr.shape}, expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ProblemError(f"{name} contains non-finite entries")
    return arr


def as_vector(value, name, size=None):
    arr = np.atleast_1d(np.asarray(value, dtype=float)).ravel()
    if size is not None and arr.size != size:
        raise ProblemError(f"{name} has length {arr.size}, expected {size}")
    return arr


def is_symmetric(M, atol=1e-10):
    M = np.asarray(M)
    return M.shape[-1] == M.shape[-2] and np.allclose(M, np.swapaxes(M, -1, -2), atol=atol)


def min_eig(M):
    """Smallest eigenvalue of the symmetric part of ``M``."""
    M = np.asarray(M, dtype=float)
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min()) if M.size else 0.0


def is_psd(M, tol=1e-10):
    return is_symmetric(M) and min_eig(M) >= -tol * max(1.0, np.abs(M).max(initial=0.0))


def is_pd(M, tol=1e-12):
    return is_symmetric(M) and M.size > 0 and min_eig(M) > tol


def freeze(arr):
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


def check_step(dt, T=None, name="dt"):
    if not np.isfinite(dt) or dt <= 0:
        raise ProblemError(f"{name} must be positive, got {dt}")
    if T is not None and dt > T:
        raise ProblemError(f"{name}={dt} exceeds the horizon T={T}")


def time_lattice(T, dt):
    """Uniform lattice ``0 = t_0 < ... < t_N = T`` with ``N = round(T / dt)``.

    The horizon must be an integer multiple of ``dt`` up to round-off.
    """
    check_step(dt, T)
    n = int(round(T / dt))
    if abs(n * dt - T) > 1e-9 * max(T, 1.0):
        raise ProblemError(f"T={T} is not an integer multiple of dt={dt}")
    return np.linspace(0.0, T, n + 1)
