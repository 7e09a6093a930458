"""Piecewise harmonic functions, their energies, and cell measures.

A piecewise harmonic function of level m is determined by its values on the
depth-m vertex set: inside every depth-m cell it is the harmonic extension of
its own boundary values.  Energies of such functions stabilize at level m, so
E(f, g) is a finite sum over cells.  The (signed) energy measure of a pair
assigns each word cell twice the rescaled energy of the pulled-back pair, and
the full table of depth-n masses is what the dimension diagnostics consume.

The cell scan at the bottom of this module is the shared engine: it walks the
word tree in fixed-size lexicographic chunks, refining per-cell boundary
coefficients one level at a time, and hands back Gram blocks of pair masses.
The chunk layout depends only on the requested depth, never on the worker
count, and all reductions run in lexicographic order, so outputs are bitwise
reproducible.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .config import CHUNK_CELLS, DEFAULT_TOLERANCES, MAX_CELLS, Tolerances
from .errors import CapExceededError, NumericalError, ValidationError
from .harmonic import HarmonicStructure
from .structure import Word, format_word, index_to_word, word_index

__all__ = [
    "PiecewiseHarmonic",
    "interpolate",
    "lift",
    "pullback",
    "energy",
    "cell_mass",
    "CellMeasureTable",
    "measure_table",
    "MeanFunctional",
    "mean_functional",
    "normalize_xi",
    "scan_cell_masses",
]


@dataclass(frozen=True, eq=False)
class PiecewiseHarmonic:
    """A function harmonic inside every cell of its level.

    values holds one number per vertex id of the level's vertex table; the
    per-cell boundary coefficients are the rows of cell_coeffs.  Restriction
    to a deeper cell is coefficient propagation by the letter extension
    matrices, applied in reverse word order.
    """

    structure: HarmonicStructure
    level: int
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=float)
        table = self.structure.spec.vertex_table(self.level)
        if vals.shape != (table.num_vertices,):
            raise ValidationError(
                f"level {self.level} needs {table.num_vertices} vertex values, "
                f"got shape {vals.shape}"
            )
        if not vals.flags.writeable:
            object.__setattr__(self, "values", vals)
        else:
            vals = vals.copy()
            vals.setflags(write=False)
            object.__setattr__(self, "values", vals)

    @cached_property
    def cell_coeffs(self) -> np.ndarray:
        """Boundary values of the restriction to each cell, in lex order."""
        table = self.structure.spec.vertex_table(self.level)
        coeffs = self.values[table.slots]
        coeffs.setflags(write=False)
        return coeffs

    def boundary(self) -> np.ndarray:
        """Values on V_0."""
        table = self.structure.spec.vertex_table(self.level)
        return self.values[table.boundary_ids]

    def _binary(self, other: "PiecewiseHarmonic", sign: float) -> "PiecewiseHarmonic":
        if not isinstance(other, PiecewiseHarmonic):
            return NotImplemented
        if other.structure is not self.structure:
            raise ValidationError("cannot combine functions on different structures")
        m = max(self.level, other.level)
        a, b = lift(self, m), lift(other, m)
        return PiecewiseHarmonic(self.structure, m, a.values + sign * b.values)

    def __add__(self, other):
        return self._binary(other, 1.0)

    def __sub__(self, other):
        return self._binary(other, -1.0)

    def __mul__(self, scalar):
        return PiecewiseHarmonic(self.structure, self.level, float(scalar) * self.values)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0


def interpolate(hs: HarmonicStructure, level: int, values) -> PiecewiseHarmonic:
    """The unique level-``level`` piecewise harmonic with the given vertex values."""
    return PiecewiseHarmonic(structure=hs, level=level, values=np.asarray(values, dtype=float))


def _refine_once(extensions: np.ndarray, block: np.ndarray) -> np.ndarray:
    # Row c*N + (i-1) of the output is A_i applied to row c: appending a
    # letter multiplies the coefficient map on the left.
    out = np.einsum("ipq,cq->cip", extensions, block, optimize=False)
    return out.reshape(-1, block.shape[1])


def _weight_products(weights: np.ndarray, depth: int) -> np.ndarray:
    """Per-word products of letter weights at the given depth, in lex order."""
    out = np.ones(1)
    for _ in range(depth):
        out = np.kron(out, weights)
    return out


def lift(f: PiecewiseHarmonic, level: int) -> PiecewiseHarmonic:
    """Re-express f at a deeper level; the function itself is unchanged."""
    if level == f.level:
        return f
    if level < f.level:
        raise ValidationError(
            f"cannot lower a level-{f.level} function to level {level}"
        )
    hs = f.structure
    table = hs.spec.vertex_table(level)
    block = f.cell_coeffs
    for _ in range(level - f.level):
        block = _refine_once(hs.extensions, block)
    values = np.empty(table.num_vertices)
    values[table.slots.ravel()] = block.ravel()
    return PiecewiseHarmonic(hs, level, values)


def pullback(f: PiecewiseHarmonic, word: Word) -> PiecewiseHarmonic:
    """The composition of f with the cell map of ``word``.

    Lands at level max(0, level - |word|); past the representation level the
    result is a single harmonic function obtained by coefficient propagation.
    """
    word = tuple(word)
    hs = f.structure
    n = hs.spec.n_letters
    for c in word:
        if not 1 <= c <= n:
            raise ValidationError(f"letter {c} outside alphabet 1..{n}")
    m = len(word)
    if m == 0:
        return f
    if m >= f.level:
        coeff = f.cell_coeffs[word_index(word[: f.level], n)]
        for letter in word[f.level :]:
            coeff = hs.extensions[letter - 1] @ coeff
        return PiecewiseHarmonic(hs, 0, coeff)
    new_level = f.level - m
    width = n ** new_level
    lo = word_index(word, n) * width
    block = f.cell_coeffs[lo : lo + width]
    table = hs.spec.vertex_table(new_level)
    values = np.empty(table.num_vertices)
    values[table.slots.ravel()] = block.ravel()
    return PiecewiseHarmonic(hs, new_level, values)


def energy(f: PiecewiseHarmonic, g: PiecewiseHarmonic | None = None) -> float:
    """E(f, g): the network energy at the common representation level.

    For piecewise harmonics the level-m energies stabilize once m reaches the
    representation level, so this finite sum is the Dirichlet form itself.
    """
    if g is None:
        g = f
    if g.structure is not f.structure:
        raise ValidationError("cannot pair functions on different structures")
    hs = f.structure
    m = max(f.level, g.level)
    cf = lift(f, m).cell_coeffs
    cg = lift(g, m).cell_coeffs
    per_cell = -np.einsum("cp,pq,cq->c", cf, hs.laplacian, cg, optimize=False)
    inv = _weight_products(1.0 / hs.weights, m)
    return float(np.sum(per_cell * inv))


def cell_mass(
    f: PiecewiseHarmonic, g: PiecewiseHarmonic | None = None, word: Word = ()
) -> float:
    """Mass the pair measure of (f, g) puts on the cell ``word``.

    Equals 2 r_w^{-1} E(pullback(f, w), pullback(g, w)); signed when f != g.
    """
    if g is None:
        g = f
    hs = f.structure
    return (
        2.0
        / hs.word_weight(word)
        * energy(pullback(f, word), pullback(g, word))
    )


# ---------------------------------------------------------------------------
# the chunked cell scan


def _chunk_prefix_depth(n_letters: int, depth: int) -> int:
    t = 0
    while n_letters ** (depth - t) > CHUNK_CELLS:
        t += 1
    return t


def _chunk_block(
    hs: HarmonicStructure, member: PiecewiseHarmonic, depth: int, t: int, chunk: int
) -> np.ndarray:
    """Coefficient rows for all depth-``depth`` cells of one prefix chunk."""
    n = hs.spec.n_letters
    lvl = member.level
    if t <= lvl:
        width = n ** (lvl - t)
        block = member.cell_coeffs[chunk * width : (chunk + 1) * width]
    else:
        prefix = index_to_word(chunk, t, n)
        coeff = member.cell_coeffs[word_index(prefix[:lvl], n)]
        for letter in prefix[lvl:]:
            coeff = hs.extensions[letter - 1] @ coeff
        block = coeff[None, :]
    for _ in range(depth - max(t, lvl)):
        block = _refine_once(hs.extensions, block)
    return block


def _energy_factor(laplacian: np.ndarray) -> np.ndarray:
    """Factor F with F @ F.T = -laplacian and an exactly null constant mode.

    Writing cell energies as Gram matrices of F-rotated coefficients keeps
    every mass matrix positive semidefinite in floating point, which a direct
    contraction with -laplacian cannot promise once pullbacks degenerate.
    """
    vals, vecs = np.linalg.eigh(-laplacian)
    vals = np.clip(vals, 0.0, None)
    vals[0] = 0.0
    return vecs * np.sqrt(vals)


def scan_cell_masses(
    hs: HarmonicStructure,
    members: Sequence[PiecewiseHarmonic],
    depth: int,
    workers: int = 1,
) -> Iterator[tuple[int, np.ndarray]]:
    """Yield (start_index, mass_block) over depth-``depth`` cells in lex order.

    mass_block[c, i, j] is the pair mass 2 r_w^{-1} E(pullbacks of members i
    and j) for the cell at lex index start_index + c.  Requires depth at or
    above every member's level.  The chunk layout is a fixed function of the
    depth, so results do not depend on ``workers``.

    Validation (including the cell cap) happens at call time, not on the
    first ``next``, so callers may size buffers after calling this.
    """
    n = hs.spec.n_letters
    if n ** depth > MAX_CELLS:
        raise CapExceededError(
            f"depth {depth} needs {n ** depth} cells, cap is {MAX_CELLS}"
        )
    for m in members:
        if m.structure is not hs:
            raise ValidationError("family member built on a different structure")
        if m.level > depth:
            raise ValidationError(
                f"scan depth {depth} is above a member of level {m.level}"
            )
    return _scan_chunks(hs, members, depth, workers)


def _scan_chunks(
    hs: HarmonicStructure,
    members: Sequence[PiecewiseHarmonic],
    depth: int,
    workers: int,
) -> Iterator[tuple[int, np.ndarray]]:
    n = hs.spec.n_letters
    t = _chunk_prefix_depth(n, depth)
    inv_letter = 1.0 / hs.weights
    inv_prefix = _weight_products(inv_letter, t)
    inv_tail = _weight_products(inv_letter, depth - t)
    factor = _energy_factor(hs.laplacian)
    width = n ** (depth - t)

    def one_chunk(chunk: int) -> tuple[int, np.ndarray]:
        blocks = np.stack(
            [_chunk_block(hs, m, depth, t, chunk) for m in members]
        )
        # Center each cell first: constants carry no energy, and cells whose
        # pullbacks are nearly constant would otherwise cancel through O(1)
        # values and leave noise above the mass floor.
        blocks -= blocks.mean(axis=2, keepdims=True)
        rooted = np.einsum("kcp,pa->kca", blocks, factor, optimize=False)
        gram = np.einsum("ica,jca->cij", rooted, rooted, optimize=False)
        gram *= (2.0 * inv_prefix[chunk]) * inv_tail[:, None, None]
        return chunk * width, gram

    chunks = range(n ** t)
    if workers <= 1:
        for chunk in chunks:
            yield one_chunk(chunk)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        # Submit in bounded waves so at most ``workers`` Gram blocks are alive.
        batch: list[int] = []
        for chunk in chunks:
            batch.append(chunk)
            if len(batch) == workers:
                yield from pool.map(one_chunk, batch)
                batch = []
        if batch:
            yield from pool.map(one_chunk, batch)


# ---------------------------------------------------------------------------
# measure tables


@dataclass(frozen=True, eq=False)
class CellMeasureTable:
    """Masses of one pair measure on all cells of a fixed depth.

    masses[c] is the (signed, if the pair is mixed) mass of the cell with lex
    index c; total is their sum and equals 2 E(f, g) up to roundoff.
    """

    depth: int
    n_letters: int
    masses: np.ndarray
    total: float

    def word(self, index: int) -> Word:
        return index_to_word(index, self.depth, self.n_letters)

    def mass(self, word: Word) -> float:
        if len(word) != self.depth:
            raise ValidationError(
                f"table holds depth-{self.depth} cells, got a length-{len(word)} word"
            )
        return float(self.masses[word_index(word, self.n_letters)])

    def coarsen(self) -> "CellMeasureTable":
        """Aggregate one level up by summing letter blocks."""
        if self.depth == 0:
            raise ValidationError("cannot coarsen a depth-0 table")
        masses = self.masses.reshape(-1, self.n_letters).sum(axis=1)
        return CellMeasureTable(
            depth=self.depth - 1,
            n_letters=self.n_letters,
            masses=masses,
            total=float(np.sum(masses)),
        )

    def write_csv(self, target) -> None:
        """Emit `word,mass` rows; target is a path or an open text handle."""
        if hasattr(target, "write"):
            self._write_rows(target)
            return
        with open(target, "w", encoding="utf-8", newline="") as handle:
            self._write_rows(handle)

    def _write_rows(self, handle) -> None:
        handle.write("word,mass\n")
        for c in range(self.masses.size):
            word = format_word(self.word(c))
            handle.write(f"{word},{self.masses[c]:.17g}\n")


def measure_table(
    f: PiecewiseHarmonic,
    g: PiecewiseHarmonic | None = None,
    depth: int = 0,
    workers: int = 1,
) -> CellMeasureTable:
    """All cell masses of the pair measure at the given depth."""
    if depth < 0:
        raise ValidationError("depth must be nonnegative")
    hs = f.structure
    n = hs.spec.n_letters
    same = g is None or g is f
    members = [f] if same else [f, g]
    scan_depth = max([depth] + [m.level for m in members])
    blocks = scan_cell_masses(hs, members, scan_depth, workers)
    per_cell = np.empty(n ** scan_depth)
    col = (0, 0) if same else (0, 1)
    for start, gram in blocks:
        per_cell[start : start + gram.shape[0]] = gram[:, col[0], col[1]]
    if scan_depth > depth:
        masses = per_cell.reshape(n ** depth, -1).sum(axis=1)
    else:
        masses = per_cell
    return CellMeasureTable(
        depth=depth, n_letters=n, masses=masses, total=float(np.sum(masses))
    )


# ---------------------------------------------------------------------------
# reference measure and normalization


@dataclass(frozen=True, eq=False)
class MeanFunctional:
    """Integration against the self-similar reference measure.

    coefficients is the vector representing u -> integral of the harmonic
    function with boundary values u; integrals of deeper piecewise harmonics
    follow by cell decomposition with the product measure weights.
    """

    coefficients: np.ndarray
    measure_weights: np.ndarray
    residual: float

    def integrate(self, f: PiecewiseHarmonic) -> float:
        mu = _weight_products(self.measure_weights, f.level)
        return float(np.sum((f.cell_coeffs @ self.coefficients) * mu))


def mean_functional(
    hs: HarmonicStructure,
    mu_weights=None,
    tol: Tolerances = DEFAULT_TOLERANCES,
) -> MeanFunctional:
    """Solve the self-similarity fixed point for the mean coefficient vector.

    The vector m satisfies m = sum_i mu_i A_i^T m with m(1) = 1, which pins
    down integration of harmonic functions against the self-similar measure
    with the given letter weights (uniform by default).
    """
    n, d = hs.spec.n_letters, hs.d
    if mu_weights is None:
        mu = np.full(n, 1.0 / n)
    else:
        mu = np.asarray(mu_weights, dtype=float)
        if mu.shape != (n,):
            raise ValidationError(f"need one measure weight per letter, got {mu.shape}")
        if np.any(mu <= 0.0):
            raise ValidationError("measure weights must be positive")
        if abs(float(mu.sum()) - 1.0) > tol.consistency:
            raise ValidationError("measure weights must sum to 1")
    transfer = np.einsum("i,ipq->qp", mu, hs.extensions, optimize=False)
    system = np.vstack([transfer - np.eye(d), np.ones((1, d))])
    rhs = np.zeros(d + 1)
    rhs[-1] = 1.0
    coeffs, *_ = np.linalg.lstsq(system, rhs, rcond=None)
    residual = max(
        float(np.linalg.norm(transfer @ coeffs - coeffs)),
        abs(float(coeffs.sum()) - 1.0),
    )
    if residual > tol.consistency:
        raise NumericalError(
            f"mean fixed point did not solve cleanly (residual {residual:.3g})"
        )
    coeffs.setflags(write=False)
    mu.setflags(write=False)
    return MeanFunctional(coefficients=coeffs, measure_weights=mu, residual=residual)


def normalize_xi(f: PiecewiseHarmonic, mean: MeanFunctional) -> PiecewiseHarmonic:
    """Center by the reference mean and scale so that twice the energy is 1.

    Constant functions (zero energy) map to the zero function.
    """
    if float(np.ptp(f.values)) == 0.0:
        return PiecewiseHarmonic(f.structure, f.level, np.zeros_like(f.values))
    twice = 2.0 * energy(f)
    if twice <= 0.0:
        return PiecewiseHarmonic(f.structure, f.level, np.zeros_like(f.values))
    center = mean.integrate(f)
    return PiecewiseHarmonic(
        f.structure, f.level, (f.values - center) / np.sqrt(twice)
    )
