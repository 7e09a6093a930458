"""Combinatorics of post-critically finite self-similar structures.

A structure is given by a finite alphabet S = {1, ..., N} (one contraction per
letter), a boundary vertex set V_0 = {p_1, ..., p_d}, a declaration that p_i is
the fixed point of the letter-i map, and a level-1 gluing relation recording
which images of boundary points coincide: (i, p) ~ (j, q) means the letter-i
copy of p and the letter-j copy of q are the same point.  All deeper vertex
identifications are derived recursively from this single relation: depth-m
cells are glued exactly where the depth-1 relation glues them inside every
depth-(m-1) cell.

Vertex ids are assigned deterministically: scanning cells in lexicographic
word order and boundary corners in declaration order, a vertex gets the id of
its first occurrence.  Equivalently, ids increase with the lexicographically
smallest (word, corner) representative of the vertex, so two builds of the
same structure always agree byte for byte.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .config import MAX_CELLS
from .errors import CapExceededError, ParseError, ValidationError

Word = tuple[int, ...]

EMPTY_WORD: Word = ()


def concat(w: Word, v: Word) -> Word:
    """Concatenate two words (letters of ``v`` appended after ``w``)."""
    return tuple(w) + tuple(v)


def shift(w: Word, m: int = 1) -> Word:
    """Drop the first ``m`` letters of ``w``.

    Raises ValidationError when ``m`` exceeds the word length.
    """
    if m < 0:
        raise ValidationError(f"shift count must be nonnegative, got {m}")
    if m > len(w):
        raise ValidationError(f"cannot shift {m} letters off a word of length {len(w)}")
    return tuple(w[m:])


def format_word(w: Word) -> str:
    """Dot-joined letters; the empty word formats as the empty string."""
    return ".".join(str(c) for c in w)


def parse_word(text: str) -> Word:
    text = text.strip()
    if not text:
        return EMPTY_WORD
    try:
        letters = tuple(int(part) for part in text.split("."))
    except ValueError as exc:
        raise ParseError(f"malformed word {text!r}") from exc
    if any(c < 1 for c in letters):
        raise ParseError(f"word letters must be positive, got {text!r}")
    return letters


def word_index(w: Word, n_letters: int) -> int:
    """Lexicographic rank of ``w`` among words of its own length."""
    idx = 0
    for c in w:
        if not 1 <= c <= n_letters:
            raise ValidationError(f"letter {c} outside alphabet 1..{n_letters}")
        idx = idx * n_letters + (c - 1)
    return idx


def index_to_word(idx: int, depth: int, n_letters: int) -> Word:
    letters = []
    for _ in range(depth):
        idx, rem = divmod(idx, n_letters)
        letters.append(rem + 1)
    return tuple(reversed(letters))


GluePair = tuple[tuple[int, int], tuple[int, int]]


@dataclass(frozen=True, eq=False)
class VertexTable:
    """Vertices of V_m together with the cell-corner incidence.

    slots[c, p] is the vertex id of corner p of the depth-m cell with
    lexicographic index c.  For m = 0 the table is V_0 itself.
    """

    depth: int
    n_letters: int
    num_vertices: int
    slots: np.ndarray
    boundary_ids: np.ndarray

    def cell_boundary(self, word: Word, corner: int) -> int:
        """Vertex id of boundary corner ``corner`` of the cell ``word``."""
        if len(word) != self.depth:
            raise ValidationError(
                f"cell word has length {len(word)}, table depth is {self.depth}"
            )
        if not 0 <= corner < self.slots.shape[1]:
            raise ValidationError(f"corner index {corner} out of range")
        return int(self.slots[word_index(word, self.n_letters), corner])


@dataclass(frozen=True, eq=False)
class StructureSpec:
    """Validated combinatorial description of a p.c.f. self-similar structure."""

    n_letters: int
    boundary: tuple[str, ...]
    gluing: tuple[GluePair, ...]
    laplacian: np.ndarray | None = None
    weights: np.ndarray | None = None
    realization: dict | None = None
    name: str = ""
    _tables: dict = field(default_factory=dict, repr=False, compare=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    @property
    def d(self) -> int:
        return len(self.boundary)

    def boundary_index(self, label: str) -> int:
        try:
            return self.boundary.index(label)
        except ValueError:
            raise ValidationError(f"unknown boundary label {label!r}") from None

    def vertex_table(self, depth: int) -> VertexTable:
        """Memoized vertex table at the given depth."""
        with self._lock:
            table = self._tables.get(depth)
        if table is None:
            table = build_vertices(self, depth)
            with self._lock:
                self._tables[depth] = table
        return table


def _resolve_roots(parent: np.ndarray) -> np.ndarray:
    """Full path compression by repeated squaring of the parent map."""
    roots = parent
    while True:
        nxt = roots[roots]
        if np.array_equal(nxt, roots):
            return nxt
        roots = nxt


def build_vertices(spec: StructureSpec, depth: int) -> VertexTable:
    """Enumerate V_depth by recursive gluing of alphabet copies of V_{depth-1}."""
    if depth < 0:
        raise ValidationError("depth must be nonnegative")
    n, d = spec.n_letters, spec.d
    if n ** depth > MAX_CELLS:
        raise CapExceededError(
            f"depth {depth} needs {n ** depth} cells, cap is {MAX_CELLS}"
        )
    slots = np.arange(d, dtype=np.int64)[None, :]
    boundary_ids = np.arange(d, dtype=np.int64)
    nv = d
    for level in range(1, depth + 1):
        base = np.concatenate([slots + i * nv for i in range(n)], axis=0)
        parent = np.arange(n * nv, dtype=np.int64)
        for (i, p), (j, q) in spec.gluing:
            a = (i - 1) * nv + boundary_ids[p]
            b = (j - 1) * nv + boundary_ids[q]
            ra, rb = parent[a], parent[b]
            while parent[ra] != ra:
                ra = parent[ra]
            while parent[rb] != rb:
                rb = parent[rb]
            if ra != rb:
                parent[max(ra, rb)] = min(ra, rb)
        roots = _resolve_roots(parent)
        flat = roots[base.ravel()]
        uniq, first = np.unique(flat, return_index=True)
        order = np.argsort(first, kind="stable")
        new_ids = np.empty(n * nv, dtype=np.int64)
        new_ids[uniq[order]] = np.arange(uniq.size, dtype=np.int64)
        slots = new_ids[flat].reshape(base.shape)
        nv = int(uniq.size)
        # p_k sits at the all-k word: row (k-1) * (n^level - 1) / (n - 1).
        run = (n ** level - 1) // (n - 1)
        boundary_ids = np.array(
            [slots[(k) * run, k] for k in range(d)], dtype=np.int64
        )
    slots.setflags(write=False)
    boundary_ids.setflags(write=False)
    return VertexTable(
        depth=depth,
        n_letters=n,
        num_vertices=nv,
        slots=slots,
        boundary_ids=boundary_ids,
    )


# ---------------------------------------------------------------------------
# document parsing


_REQUIRED_FIELDS = ("alphabet_size", "boundary", "fixed_points", "gluing")


def _as_matrix(raw, rows: int, cols: int, what: str) -> np.ndarray:
    arr = np.asarray(raw, dtype=float)
    if arr.shape != (rows, cols):
        raise ParseError(f"{what} must be a {rows}x{cols} matrix, got shape {arr.shape}")
    return arr


def _parse_realization(raw, n: int, boundary: Sequence[str]) -> dict:
    if not isinstance(raw, Mapping):
        raise ParseError("realization must be an object")
    try:
        dim = int(raw["dimension"])
        maps_raw = raw["maps"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError("realization needs integer 'dimension' and a 'maps' object") from exc
    maps = {}
    for letter in range(1, n + 1):
        key = str(letter)
        if key not in maps_raw:
            raise ParseError(f"realization missing map for letter {letter}")
        entry = maps_raw[key]
        matrix = _as_matrix(entry.get("matrix"), dim, dim, f"map {letter} matrix")
        offset = np.asarray(entry.get("offset"), dtype=float)
        if offset.shape != (dim,):
            raise ParseError(f"map {letter} offset must have length {dim}")
        maps[letter] = (matrix, offset)
    points = None
    if "boundary_points" in raw:
        points = {}
        for label in boundary:
            if label not in raw["boundary_points"]:
                raise ParseError(f"realization boundary_points missing {label!r}")
            pt = np.asarray(raw["boundary_points"][label], dtype=float)
            if pt.shape != (dim,):
                raise ParseError(f"boundary point {label!r} must have length {dim}")
            points[label] = pt
    return {"dimension": dim, "maps": maps, "boundary_points": points}


def _check_realization_geometry(spec: StructureSpec) -> None:
    """When coordinates are supplied, fixed points and gluings must agree with them."""
    real = spec.realization
    if not real or real["boundary_points"] is None:
        return
    pts = real["boundary_points"]
    maps = real["maps"]

    def image(letter: int, label: str) -> np.ndarray:
        mat, off = maps[letter]
        return mat @ pts[label] + off

    scale = max(float(np.linalg.norm(p)) for p in pts.values()) or 1.0
    for i in range(1, spec.d + 1):
        label = spec.boundary[i - 1]
        err = np.linalg.norm(image(i, label) - pts[label])
        if err > 1e-9 * scale:
            raise ValidationError(
                f"fixed-point mismatch: map {i} does not fix {label!r} "
                f"in the supplied realization (error {err:.3g})"
            )
    for (i, p), (j, q) in spec.gluing:
        err = np.linalg.norm(image(i, spec.boundary[p]) - image(j, spec.boundary[q]))
        if err > 1e-9 * scale:
            raise ValidationError(
                f"gluing conflict: declared identification ({i},{spec.boundary[p]}) ~ "
                f"({j},{spec.boundary[q]}) does not hold in the realization"
            )


def validate_structure(raw: Mapping) -> StructureSpec:
    """Build a StructureSpec from a parsed document, checking every invariant."""
    for key in _REQUIRED_FIELDS:
        if key not in raw:
            raise ParseError(f"structure document missing field {key!r}")
    try:
        n = int(raw["alphabet_size"])
    except (TypeError, ValueError) as exc:
        raise ParseError("alphabet_size must be an integer") from exc
    if n < 2:
        raise ValidationError(f"alphabet must have at least two letters, got {n}")

    boundary_raw = raw["boundary"]
    if not isinstance(boundary_raw, Sequence) or isinstance(boundary_raw, str):
        raise ParseError("boundary must be a list of labels")
    boundary = tuple(str(b) for b in boundary_raw)
    if len(set(boundary)) != len(boundary):
        raise ValidationError("boundary labels must be distinct")
    d = len(boundary)
    if d < 2:
        raise ValidationError("boundary needs at least two vertices")
    if d > n:
        raise ValidationError(
            f"boundary has {d} vertices but only {n} letters can declare fixed points"
        )

    fixed = raw["fixed_points"]
    if not isinstance(fixed, Mapping):
        raise ParseError("fixed_points must be a map letter -> boundary label")
    declared = {}
    for key, label in fixed.items():
        try:
            letter = int(key)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"fixed_points key {key!r} is not a letter") from exc
        if not 1 <= letter <= n:
            raise ValidationError(f"fixed_points letter {letter} outside alphabet 1..{n}")
        if str(label) not in boundary:
            raise ValidationError(f"fixed_points target {label!r} is not a boundary label")
        declared[letter] = str(label)
    # Normal form: letter i fixes p_i for i = 1..d, and every boundary vertex
    # is covered.  This is the standing assumption behind run-word analysis.
    expected = {i + 1: boundary[i] for i in range(d)}
    if declared != expected:
        raise ValidationError(
            "fixed-point mismatch: expected letters 1..d to fix the boundary "
            f"vertices in declaration order, got {declared!r}"
        )

    gluing_raw = raw["gluing"]
    if not isinstance(gluing_raw, Sequence):
        raise ParseError("gluing must be a list of 4-tuples [i, p, j, q]")
    pairs: list[GluePair] = []
    seen_slots: dict[tuple[int, int], GluePair] = {}
    seen_pairs: set[GluePair] = set()
    boundary_pos = {label: k for k, label in enumerate(boundary)}
    for entry in gluing_raw:
        if not isinstance(entry, Sequence) or len(entry) != 4:
            raise ParseError(f"gluing entry {entry!r} is not a 4-tuple [i, p, j, q]")
        i_raw, p_raw, j_raw, q_raw = entry
        try:
            i, j = int(i_raw), int(j_raw)
        except (TypeError, ValueError) as exc:
            raise ParseError(f"gluing entry {entry!r} has non-integer letters") from exc
        for letter in (i, j):
            if not 1 <= letter <= n:
                raise ValidationError(f"gluing letter {letter} outside alphabet 1..{n}")
        if i == j:
            raise ValidationError(f"gluing entry {entry!r} identifies a cell with itself")
        for label in (p_raw, q_raw):
            if str(label) not in boundary_pos:
                raise ValidationError(f"gluing label {label!r} is not a boundary label")
        a = (i, boundary_pos[str(p_raw)])
        b = (j, boundary_pos[str(q_raw)])
        pair: GluePair = (min(a, b), max(a, b))
        if pair in seen_pairs:
            continue
        for slot in (a, b):
            other = seen_slots.get(slot)
            if other is not None:
                raise ValidationError(
                    f"gluing conflict: slot (cell {slot[0]}, {boundary[slot[1]]}) "
                    "appears in two identifications with distinct targets"
                )
        seen_slots[a] = pair
        seen_slots[b] = pair
        seen_pairs.add(pair)
        pairs.append(pair)

    # The level-1 cell adjacency graph must be connected.
    adj: dict[int, set[int]] = {i: set() for i in range(1, n + 1)}
    for (i, _), (j, _) in pairs:
        adj[i].add(j)
        adj[j].add(i)
    seen = {1}
    stack = [1]
    while stack:
        for nb in adj[stack.pop()]:
            if nb not in seen:
                seen.add(nb)
                stack.append(nb)
    if len(seen) != n:
        missing = sorted(set(range(1, n + 1)) - seen)
        raise ValidationError(
            f"disconnected level-1 graph: cells {missing} never touch cell 1's component"
        )

    laplacian = None
    if raw.get("laplacian") is not None:
        laplacian = _as_matrix(raw["laplacian"], d, d, "laplacian")
        laplacian.setflags(write=False)
    weights = None
    if raw.get("weights") is not None:
        weights = np.asarray(raw["weights"], dtype=float)
        if weights.shape != (n,):
            raise ParseError(f"weights must list one number per letter, got {weights.shape}")
        weights.setflags(write=False)

    realization = None
    if raw.get("realization") is not None:
        realization = _parse_realization(raw["realization"], n, boundary)

    spec = StructureSpec(
        n_letters=n,
        boundary=boundary,
        gluing=tuple(pairs),
        laplacian=laplacian,
        weights=weights,
        realization=realization,
        name=str(raw.get("name", "")),
    )
    _check_realization_geometry(spec)

    # Distinct boundary vertices must stay distinct at depth 1.
    table1 = spec.vertex_table(1)
    if len(set(table1.boundary_ids.tolist())) != d:
        raise ValidationError("gluing conflict: two boundary vertices are identified")
    return spec


def parse_structure(text: str) -> StructureSpec:
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"structure document is not valid JSON: {exc}") from exc
    if not isinstance(raw, Mapping):
        raise ParseError("structure document must be a JSON object")
    return validate_structure(raw)


def load_structure(path: str | Path) -> StructureSpec:
    """Read and validate a structure document from disk."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    spec = parse_structure(text)
    if not spec.name:
        object.__setattr__(spec, "name", path.stem)
    return spec


def builtin_structure_path(name: str) -> Path:
    """Path of a structure document shipped with the package."""
    here = Path(__file__).resolve().parent / "data" / f"{name}.json"
    if not here.exists():
        available = sorted(p.stem for p in here.parent.glob("*.json"))
        raise ParseError(f"no builtin structure {name!r}; available: {available}")
    return here


def builtin_structure(name: str) -> StructureSpec:
    return load_structure(builtin_structure_path(name))
