"""Harmonic structures: boundary Laplacians, extension matrices, eigen data.

The pair (D, r) consists of a symmetric matrix D on the boundary vertices and
a positive weight r_i < 1 per letter.  It is accepted only when the level-1
network energy, minimized over interior vertex values, reproduces D exactly:
the Schur complement of the interior block must equal D up to roundoff.  That
fixed-point identity is what makes energies consistent across depths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import DEFAULT_TOLERANCES, Tolerances
from .errors import NotHarmonicError, NumericalError, ValidationError
from .structure import StructureSpec, VertexTable, Word

__all__ = [
    "validate_laplacian",
    "graph_energy",
    "level_one_energy_matrix",
    "harmonic_extension",
    "extension_matrices",
    "HarmonicStructure",
    "EigenData",
    "eigen_data",
    "harmonic_structure",
]


def validate_laplacian(
    matrix: np.ndarray, tol: Tolerances = DEFAULT_TOLERANCES
) -> np.ndarray:
    """Check the boundary Laplacian axioms and return the matrix as float64.

    Required: symmetry, nonpositive definiteness, kernel spanned by the
    constant vector and nothing else, and nonnegative off-diagonal entries.
    """
    D = np.asarray(matrix, dtype=float)
    if D.ndim != 2 or D.shape[0] != D.shape[1]:
        raise ValidationError(f"laplacian must be square, got shape {D.shape}")
    d = D.shape[0]
    scale = float(np.abs(D).max()) or 1.0
    if float(np.abs(D - D.T).max()) > tol.symmetry * scale:
        raise ValidationError("laplacian is not symmetric")
    D = 0.5 * (D + D.T)
    off = D - np.diag(np.diag(D))
    if float(off.min()) < -tol.offdiagonal * scale:
        raise ValidationError("laplacian has a negative off-diagonal entry")
    eigvals = np.linalg.eigvalsh(D)
    if eigvals[-1] > tol.definiteness * scale:
        raise ValidationError(
            f"laplacian is not nonpositive definite (top eigenvalue {eigvals[-1]:.3g})"
        )
    ones = np.ones(d) / np.sqrt(d)
    if float(np.linalg.norm(D @ ones)) > tol.kernel * scale:
        raise ValidationError("laplacian does not annihilate constants")
    # Second-largest eigenvalue must be strictly negative: constants only.
    if d > 1 and eigvals[-2] > -tol.kernel * scale:
        raise ValidationError("laplacian kernel is larger than the constants")
    D.setflags(write=False)
    return D


def graph_energy(
    slots: np.ndarray,
    inv_r: np.ndarray,
    D: np.ndarray,
    u: np.ndarray,
    v: np.ndarray | None = None,
) -> float:
    """Bilinear network energy sum_w (1 / r_w) * (-D u|_w, v|_w).

    slots is the (cells x d) vertex-id table, inv_r the per-cell resistance
    reciprocal, and u, v vertex vectors.  With v omitted this is the quadratic
    form of u.
    """
    if v is None:
        v = u
    uu = np.asarray(u, dtype=float)[slots]
    vv = np.asarray(v, dtype=float)[slots]
    per_cell = -np.einsum("cp,pq,cq->c", uu, D, vv, optimize=False)
    return float(np.sum(per_cell * inv_r))


def level_one_energy_matrix(spec: StructureSpec, D: np.ndarray, r: np.ndarray) -> tuple[np.ndarray, VertexTable]:
    """Assemble the level-1 quadratic form sum_i r_i^{-1} (psi_i^* . ) on V_1."""
    table = spec.vertex_table(1)
    nv = table.num_vertices
    H = np.zeros((nv, nv))
    for i in range(spec.n_letters):
        ids = table.slots[i]
        H[np.ix_(ids, ids)] += (-D) / r[i]
    return H, table


def harmonic_extension(
    spec: StructureSpec,
    D: np.ndarray,
    r: np.ndarray,
    boundary_values: np.ndarray,
) -> np.ndarray:
    """Solve the level-1 interior values that minimize the network energy.

    Returns the full V_1 vector (boundary entries fixed to the given values).
    Columns of a matrix input are extended independently.
    """
    H, table = level_one_energy_matrix(spec, D, r)
    nv = table.num_vertices
    boundary = table.boundary_ids
    interior = np.setdiff1d(np.arange(nv), boundary)
    vals = np.asarray(boundary_values, dtype=float)
    squeeze = vals.ndim == 1
    if squeeze:
        vals = vals[:, None]
    if vals.shape[0] != boundary.size:
        raise ValidationError(
            f"expected {boundary.size} boundary values, got {vals.shape[0]}"
        )
    full = np.zeros((nv, vals.shape[1]))
    full[boundary] = vals
    if interior.size:
        A = H[np.ix_(interior, interior)]
        b = -H[np.ix_(interior, boundary)] @ vals
        try:
            full[interior] = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise NumericalError("interior system is singular") from exc
    return full[:, 0] if squeeze else full


@dataclass(frozen=True, eq=False)
class HarmonicStructure:
    """A validated harmonic pair (D, r) with its letter extension matrices.

    extensions[i] maps boundary values of a function to the boundary values
    of its harmonic restriction to the letter-(i+1) cell.  Pulling back along
    a word multiplies these in reverse letter order.
    """

    spec: StructureSpec
    laplacian: np.ndarray
    weights: np.ndarray
    extensions: np.ndarray
    residual: float

    @property
    def d(self) -> int:
        return self.laplacian.shape[0]

    def pullback_matrix(self, word: Word) -> np.ndarray:
        """Coefficient map of the restriction to the cell ``word``."""
        out = np.eye(self.d)
        for letter in word:
            out = self.extensions[letter - 1] @ out
        return out

    def word_weight(self, word: Word) -> float:
        """Product of the letter weights along ``word``."""
        return float(np.prod(self.weights[np.array(word, dtype=int) - 1])) if word else 1.0


def extension_matrices(
    spec: StructureSpec,
    D: np.ndarray,
    r: np.ndarray,
    tol: Tolerances = DEFAULT_TOLERANCES,
) -> HarmonicStructure:
    """Validate (D, r) as a harmonic pair and compute the extension matrices.

    The fixed-point check is an equality: the boundary trace of the level-1
    form must reproduce D entrywise within tol.fixed_point.
    """
    D = validate_laplacian(D, tol)
    r = np.asarray(r, dtype=float)
    if r.shape != (spec.n_letters,):
        raise ValidationError(
            f"need one weight per letter, got shape {r.shape} for {spec.n_letters} letters"
        )
    if np.any(r <= 0.0) or np.any(r >= 1.0):
        raise ValidationError("letter weights must lie strictly between 0 and 1")

    table = spec.vertex_table(1)
    d = spec.d
    full = harmonic_extension(spec, D, r, np.eye(d))

    # Boundary trace of the level-1 form on the harmonic extensions.  The
    # matrix identity trace = -D checks every bilinear pair at once, so sums
    # of basis vectors are covered by bilinearity.
    H, _ = level_one_energy_matrix(spec, D, r)
    traced = full.T @ H @ full
    scale = float(np.abs(D).max()) or 1.0
    residual = float(np.abs(traced + D).max()) / scale
    if residual > tol.fixed_point:
        raise NotHarmonicError(
            f"(D, r) is not a harmonic pair: trace residual {residual:.3g}",
            residual=residual,
        )

    exts = np.empty((spec.n_letters, d, d))
    for i in range(spec.n_letters):
        exts[i] = full[table.slots[i]]
    exts.setflags(write=False)
    if r.flags.writeable:
        r.setflags(write=False)
    return HarmonicStructure(
        spec=spec, laplacian=D, weights=r, extensions=exts, residual=residual
    )


@dataclass(frozen=True, eq=False)
class EigenData:
    """Spectral data of one letter extension matrix at a fixed boundary point.

    left: left eigenvector at the weight r_i, normalized as the D column of
        its fixed point (vanishing off-diagonal pairing is the content of the
        eigen equation).
    right: nonnegative right eigenvector at r_i, scaled so (left, right) = 1.
    energy_mass: the positive number -right^T D right, the energy mass the
        point carries.
    second_modulus: largest modulus among the eigenvalues below r_i.
    """

    letter: int
    left: np.ndarray
    right: np.ndarray
    energy_mass: float
    second_modulus: float


def eigen_data(
    hs: HarmonicStructure,
    letter: int,
    tol: Tolerances = DEFAULT_TOLERANCES,
) -> EigenData:
    """Eigen decomposition of the letter's extension matrix at its fixed point.

    Only letters with a declared fixed boundary point (1 <= letter <= d)
    carry this data.  Checks: 1 and r_i are simple eigenvalues, every other
    eigenvalue has modulus strictly below r_i, the right eigenvector can be
    taken entrywise nonnegative, and the left one is the corresponding D
    column up to scale.
    """
    d = hs.d
    if not 1 <= letter <= d:
        raise ValidationError(
            f"letter {letter} has no declared fixed boundary point (need 1..{d})"
        )
    A = hs.extensions[letter - 1]
    ri = float(hs.weights[letter - 1])
    eigvals = np.linalg.eigvals(A)
    dist_one = np.abs(eigvals - 1.0)
    dist_ri = np.abs(eigvals - ri)
    if np.sum(dist_one < tol.eigen_gap) != 1:
        raise ValidationError(f"eigenvalue 1 of letter {letter} is not simple")
    if np.sum(dist_ri < tol.eigen_gap) != 1:
        raise ValidationError(f"eigenvalue {ri} of letter {letter} is not simple")
    rest = np.abs(eigvals[(dist_one >= tol.eigen_gap) & (dist_ri >= tol.eigen_gap)])
    second = float(rest.max()) if rest.size else 0.0
    if second >= ri - tol.eigen_gap:
        raise ValidationError(
            f"letter {letter}: eigenvalue modulus {second:.6g} is not below r = {ri}"
        )

    left = hs.laplacian[:, letter - 1].copy()
    if float(np.linalg.norm(left @ A - ri * left)) > tol.eigen_gap * max(
        1.0, float(np.linalg.norm(left))
    ):
        raise ValidationError(
            f"letter {letter}: D column at the fixed point is not a left eigenvector at r"
        )

    vals, vecs = np.linalg.eig(A)
    k = int(np.argmin(np.abs(vals - ri)))
    right = np.real(vecs[:, k])
    if float(right.sum()) < 0.0:
        right = -right
    if float(right.min()) < -tol.eigen_sign * float(np.abs(right).max()):
        raise ValidationError(
            f"letter {letter}: right eigenvector at r has mixed signs"
        )
    right = np.clip(right, 0.0, None)
    pairing = float(left @ right)
    if abs(pairing) < tol.eigen_gap:
        raise NumericalError(
            f"letter {letter}: left/right eigenvector pairing is numerically zero"
        )
    right = right / pairing
    mass = float(-(right @ hs.laplacian @ right))
    if mass <= 0.0:
        raise ValidationError(
            f"letter {letter}: energy mass of the fixed point is not positive"
        )
    left.setflags(write=False)
    right.setflags(write=False)
    return EigenData(
        letter=letter,
        left=left,
        right=right,
        energy_mass=mass,
        second_modulus=second,
    )


def harmonic_structure(
    spec: StructureSpec,
    D: np.ndarray | None = None,
    r: np.ndarray | None = None,
    tol: Tolerances = DEFAULT_TOLERANCES,
) -> HarmonicStructure:
    """Harmonic structure from explicit data or the structure document."""
    if D is None:
        D = spec.laplacian
    if r is None:
        r = spec.weights
    if D is None or r is None:
        raise ValidationError(
            "no harmonic data: the structure document declares neither a "
            "laplacian nor weights and none were passed"
        )
    return extension_matrices(spec, D, r, tol)
