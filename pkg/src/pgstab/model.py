"""Shared descriptions of linear dynamics and quadratic costs.

Controllers are plain ``numpy`` arrays of shape ``(d_u, d_x)`` acting by
state feedback ``u = K x``; value matrices are symmetric ``(d_x, d_x)``
arrays.  Only the two container types below are wrapped in dataclasses,
everything else stays a bare array.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def as_matrix(value, name: str) -> np.ndarray:
    """Coerce to a finite 2-D float array, copying the input."""
    m = np.array(value, dtype=float)
    if m.ndim != 2:
        raise ValueError(f"{name} must be a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ValueError(f"{name} has non-finite entries")
    return m


@dataclass(frozen=True)
class LinearSystem:
    """Discrete-time linear dynamics ``x' = A x + B u``."""

    A: np.ndarray
    B: np.ndarray

    def __post_init__(self):
        A = as_matrix(self.A, "A")
        B = as_matrix(self.B, "B")
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got shape {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(
                f"B must have {A.shape[0]} rows to match A, got shape {B.shape}"
            )
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]

    def closed_loop(self, K: np.ndarray) -> np.ndarray:
        """Closed-loop matrix ``A + B K`` for the gain ``K``."""
        K = np.asarray(K, dtype=float)
        if K.shape != (self.d_u, self.d_x):
            raise ValueError(
                f"gain must have shape {(self.d_u, self.d_x)}, got {K.shape}"
            )
        return self.A + self.B @ K


@dataclass(frozen=True)
class CostSpec:
    """Quadratic stage cost ``x'Qx + u'Ru`` with Q, R symmetric positive definite."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = as_matrix(self.Q, "Q")
        R = as_matrix(self.R, "R")
        for name, m in (("Q", Q), ("R", R)):
            if m.shape[0] != m.shape[1]:
                raise ValueError(f"{name} must be square, got shape {m.shape}")
            if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
                raise ValueError(f"{name} must be symmetric")
            if np.linalg.eigvalsh(m).min() <= 0:
                raise ValueError(f"{name} must be positive definite")
        object.__setattr__(self, "Q", (Q + Q.T) / 2.0)
        object.__setattr__(self, "R", (R + R.T) / 2.0)

    @property
    def d_x(self) -> int:
        return self.Q.shape[0]

    @property
    def d_u(self) -> int:
        return self.R.shape[0]

    def min_eig(self) -> float:
        """Smallest eigenvalue over both Q and R."""
        return float(
            min(np.linalg.eigvalsh(self.Q).min(), np.linalg.eigvalsh(self.R).min())
        )

    @staticmethod
    def identity(d_x: int, d_u: int, scale: float = 1.0) -> "CostSpec":
        """The default cost Q = scale * I, R = scale * I."""
        return CostSpec(scale * np.eye(d_x), scale * np.eye(d_u))

    def stage(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Stage cost, batched over any leading axes of x and u."""
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        return np.einsum("...i,ij,...j->...", x, self.Q, x) + np.einsum(
            "...a,ab,...b->...", u, self.R, u
        )
