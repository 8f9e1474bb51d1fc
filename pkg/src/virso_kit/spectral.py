"""Normalized graph Laplacian assembly and low-mode eigensolvers.

The symmetric degree-normalized Laplacian L = I - D^{-1/2} A D^{-1/2}
(binary or weighted adjacency) has a real spectrum in [0, 2] and, on a
connected graph, a null space spanned by D^{1/2} 1. The m lowest
eigenpairs are computed by a block LOBPCG iteration; a dense symmetric
eigendecomposition serves as the reference for small problems.

Eigenvector signs are fixed by forcing the largest-magnitude component
of each column positive, so bases are reproducible across runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blobio import F32, read_blob, read_manifest, write_blob, write_manifest
from .errors import (
    ArtifactError,
    ConvergenceError,
    DegenerateGraphError,
    InvalidParameterError,
    ShapeError,
)
from .graphs import Graph


@dataclass(frozen=True)
class SparseLaplacian:
    """Symmetric CSR matrix with unit diagonal (non-isolated nodes)."""

    n: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    weighted: bool

    def matmat(self, x: np.ndarray) -> np.ndarray:
        """L @ x for x of shape (n,) or (n, k)."""
        squeeze = x.ndim == 1
        if squeeze:
            x = x[:, None]
        if x.shape[0] != self.n:
            raise ShapeError(f"operand has {x.shape[0]} rows, Laplacian is {self.n}")
        prods = self.data[:, None] * x[self.indices]
        # every row holds at least the diagonal, so reduceat segments are valid
        out = np.add.reduceat(prods, self.indptr[:-1], axis=0)
        return out[:, 0] if squeeze else out

    def __matmul__(self, x):
        return self.matmat(x)

    def entries(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        return rows, self.indices, self.data

    def to_dense(self) -> np.ndarray:
        rows, cols, vals = self.entries()
        dense = np.zeros((self.n, self.n))
        dense[rows, cols] = vals
        return dense


@dataclass(frozen=True)
class EigenBasis:
    """The m lowest eigenpairs: column-orthonormal q (n x m), ascending sigma."""

    q: np.ndarray
    sigma: np.ndarray

    @property
    def n(self) -> int:
        return self.q.shape[0]

    @property
    def m(self) -> int:
        return self.q.shape[1]

    def validate(self, laplacian: SparseLaplacian, tol: float = 1e-8) -> None:
        gram = self.q.T @ self.q
        if np.max(np.abs(gram - np.eye(self.m))) > 1e-8:
            raise ConvergenceError("basis is not orthonormal to 1e-8")
        if np.any(np.diff(self.sigma) < -1e-12):
            raise ConvergenceError("eigenvalues are not ascending")
        res = laplacian @ self.q - self.q * self.sigma
        norms = np.linalg.norm(res, axis=0)
        bound = tol * np.maximum(1.0, np.abs(self.sigma))
        if np.any(norms > bound):
            raise ConvergenceError(
                "residual bound violated", worst_residual=float(norms.max())
            )


def normalized_laplacian(graph: Graph, weighted: bool = False) -> SparseLaplacian:
    """L = I - D^{-1/2} A D^{-1/2}; A binary or inverse-distance weighted."""
    if weighted and graph.weights is None:
        raise InvalidParameterError("weighted Laplacian requires edge weights on the graph")
    src, dst, w = graph.directed()
    avals = w if weighted else np.ones(src.shape[0])
    deg = np.zeros(graph.n)
    np.add.at(deg, src, avals)
    dead = np.flatnonzero(deg == 0.0)
    if dead.size:
        raise DegenerateGraphError(f"isolated node {int(dead[0])} has degree 0")
    inv_sqrt = 1.0 / np.sqrt(deg)
    # one value per canonical edge, reused for both orientations: exact symmetry
    e = graph.edges
    ew = graph.weights if weighted else np.ones(e.shape[0])
    off = -ew * inv_sqrt[e[:, 0]] * inv_sqrt[e[:, 1]]
    rows = np.concatenate([e[:, 0], e[:, 1], np.arange(graph.n)])
    cols = np.concatenate([e[:, 1], e[:, 0], np.arange(graph.n)])
    vals = np.concatenate([off, off, np.ones(graph.n)])
    order = np.lexsort((cols, rows))
    rows, cols, vals = rows[order], cols[order], vals[order]
    indptr = np.zeros(graph.n + 1, dtype=np.int64)
    np.add.at(indptr, rows + 1, 1)
    np.cumsum(indptr, out=indptr)
    return SparseLaplacian(graph.n, indptr, cols, vals, weighted)


def _fix_signs(q: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(q), axis=0)
    signs = np.where(q[idx, np.arange(q.shape[1])] < 0, -1.0, 1.0)
    return q * signs


def _orthonormal_columns(s: np.ndarray) -> np.ndarray:
    """Orthonormal basis of the column span, dropping rank-deficient directions."""
    u, sv, _ = np.linalg.svd(s, full_matrices=False)
    if sv.size == 0:
        return u
    keep = sv > sv[0] * max(s.shape) * np.finfo(float).eps * 10
    return u[:, keep]


def _ortho_against(base: np.ndarray, block: np.ndarray) -> np.ndarray:
    """Orthonormalize `block` against an orthonormal `base` (twice, for stability)."""
    y = block - base @ (base.T @ block)
    y = y - base @ (base.T @ y)
    scale = np.linalg.norm(block)
    if scale == 0.0:
        return np.zeros((block.shape[0], 0))
    u, sv, _ = np.linalg.svd(y, full_matrices=False)
    keep = sv > scale * max(block.shape) * np.finfo(float).eps * 100
    return u[:, keep]


def lobpcg_smallest(
    laplacian: SparseLaplacian,
    m: int,
    tol: float = 1e-10,
    max_iter: int = 500,
    seed: int = 0,
    preconditioner: str = "none",
    largest: bool = False,
) -> EigenBasis:
    """m extremal eigenpairs via LOBPCG with a seeded random initial block.

    Convergence requires per-pair residuals ||L q - sigma q|| <= tol * max(1, sigma).
    `largest=True` selects the m highest eigenvalues instead of the lowest
    (kept for empirical comparison; the low modes are the default basis).
    """
    n = laplacian.n
    if not (1 <= m <= max(1, n // 4)):
        raise InvalidParameterError(
            f"mode count m={m} outside stable range 1..max(1, n//4) for n={n}"
        )
    if tol <= 0:
        raise InvalidParameterError("tol must be positive")
    if preconditioner not in ("none", "jacobi"):
        raise InvalidParameterError(f"unknown preconditioner {preconditioner!r}")
    if preconditioner == "jacobi":
        rows, cols, vals = laplacian.entries()
        diag = np.zeros(n)
        diag[rows[rows == cols]] = vals[rows == cols]
        inv_diag = 1.0 / np.where(diag == 0.0, 1.0, diag)
        apply_prec = lambda r: inv_diag[:, None] * r
    else:
        apply_prec = lambda r: r

    sel = slice(-m, None) if largest else slice(0, m)
    rng = np.random.default_rng(seed)
    x = _orthonormal_columns(rng.standard_normal((n, m)))
    if x.shape[1] < m:
        raise ConvergenceError("initial block is rank deficient")
    # Rayleigh-Ritz on the initial block
    ax = laplacian @ x
    t = x.T @ ax
    theta, z = np.linalg.eigh((t + t.T) / 2)
    theta, z = theta[sel], z[:, sel]
    x, ax = x @ z, ax @ z
    p = None
    worst = np.inf
    for _ in range(max_iter):
        r = ax - x * theta
        norms = np.linalg.norm(r, axis=0)
        worst = float(norms.max())
        if np.all(norms <= tol * np.maximum(1.0, np.abs(theta))):
            order = np.argsort(theta)
            return EigenBasis(q=_fix_signs(x[:, order]), sigma=theta[order])
        w = _ortho_against(x, apply_prec(r))
        if w.shape[1] == 0:
            raise ConvergenceError(
                f"LOBPCG stagnated above tolerance (worst residual {worst:.3e})",
                worst_residual=worst,
            )
        if p is not None and p.size:
            xw = np.concatenate([x, w], axis=1)
            p_o = _ortho_against(xw, p)
            s = np.concatenate([xw, p_o], axis=1)
        else:
            s = np.concatenate([x, w], axis=1)
        as_ = laplacian @ s
        g = s.T @ as_
        evals, z = np.linalg.eigh((g + g.T) / 2)
        evals, z = evals[sel], z[:, sel]
        if evals.size < m:
            raise ConvergenceError("search subspace collapsed below m directions")
        # x occupies the first m columns of s, so rows m: of z give the
        # contribution from [w, p]: the conjugate direction for the next step
        x = s @ z
        p = s[:, m:] @ z[m:, :] if s.shape[1] > m else None
        theta = evals
        ax = laplacian @ x
    raise ConvergenceError(
        f"LOBPCG did not converge in {max_iter} iterations (worst residual {worst:.3e})",
        worst_residual=worst,
    )


def dense_eigen_reference(laplacian: SparseLaplacian, m: int, largest: bool = False) -> EigenBasis:
    """Exact m extremal eigenpairs from a full symmetric eigendecomposition."""
    if laplacian.n > 2000:
        raise InvalidParameterError(
            f"n = {laplacian.n} too large for the dense reference (limit 2000); "
            "use lobpcg_smallest"
        )
    if not (1 <= m <= laplacian.n):
        raise InvalidParameterError(f"need 1 <= m <= n, got m={m}")
    evals, evecs = np.linalg.eigh(laplacian.to_dense())
    if largest:
        evals, evecs = evals[-m:], evecs[:, -m:]
    else:
        evals, evecs = evals[:m], evecs[:, :m]
    return EigenBasis(q=_fix_signs(evecs), sigma=evals)


def gft(basis: EigenBasis, v: np.ndarray) -> np.ndarray:
    """Project node signals onto the retained eigenmodes: q^T v."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[0] != basis.n:
        raise ShapeError(f"signal has {v.shape[0]} rows, basis has {basis.n}")
    return basis.q.T @ v


def igft(basis: EigenBasis, c: np.ndarray) -> np.ndarray:
    """Lift mode coefficients back to node space: q c."""
    c = np.asarray(c, dtype=np.float64)
    if c.shape[0] != basis.m:
        raise ShapeError(f"coefficients have {c.shape[0]} rows, basis has {basis.m} modes")
    return basis.q @ c


def save_eigen_basis(
    basis: EigenBasis, out_dir: Path, graph_hash: str, name: str = "basis"
) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    q_blob, s_blob = f"{name}_q.f32", f"{name}_sigma.f32"
    write_blob(out_dir / q_blob, basis.q, F32)
    write_blob(out_dir / s_blob, basis.sigma, F32)
    write_manifest(
        out_dir / f"{name}.json",
        {
            "kind": "eigen_basis",
            "n": basis.n,
            "m": basis.m,
            "graph_hash": graph_hash,
            "q_blob": q_blob,
            "q_layout": "float32-le n x m row-major",
            "sigma_blob": s_blob,
        },
    )
    return out_dir / f"{name}.json"


def load_eigen_basis(manifest_path: Path, expected_graph_hash: str | None = None) -> EigenBasis:
    manifest_path = Path(manifest_path)
    man = read_manifest(manifest_path)
    if man.get("kind") != "eigen_basis":
        raise ArtifactError(f"{manifest_path} is not an eigen-basis manifest")
    if expected_graph_hash is not None and man["graph_hash"] != expected_graph_hash:
        raise ArtifactError(
            "eigen basis was computed for a different graph "
            f"(cache key {man['graph_hash'][:12]}..., expected {expected_graph_hash[:12]}...)"
        )
    q = read_blob(manifest_path.parent / man["q_blob"], F32, (man["n"], man["m"]))
    sigma = read_blob(manifest_path.parent / man["sigma_blob"], F32, (man["m"],))
    return EigenBasis(q=q.astype(np.float64), sigma=sigma.astype(np.float64))
