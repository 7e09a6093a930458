"""Command-line surface.

Five subcommands: ``validate`` (structure and harmonic-pair checks plus the
eigen table), ``measure`` (cell-mass CSV for one function pair), ``scan``
(rank diagnostics over a depth range), ``embed`` (vertex coordinates and
per-cell metric export), and ``chainrule`` (discrete chain-rule convergence
report for a polynomial of the coordinates).

Exit codes: 0 on success, 1 when a mathematical or validation check fails,
2 when input cannot be read or parsed.
"""

from __future__ import annotations

import argparse
import json
import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import DEFAULT_TOLERANCES
from .errors import (
    FracformError,
    NumericalError,
    ParseError,
    ValidationError,
)
from .structure import (
    StructureSpec,
    builtin_structure_path,
    format_word,
    load_structure,
)
from .harmonic import HarmonicStructure, eigen_data, graph_energy, harmonic_structure
from .energy import (
    MeanFunctional,
    PiecewiseHarmonic,
    _weight_products,
    energy,
    interpolate,
    lift,
    mean_functional,
    measure_table,
    scan_cell_masses,
)
from .dimension import (
    FunctionFamily,
    density_matrices,
    family_from_values,
    harmonic_family,
    level1_family,
    rank_statistics,
    verify_field_invariants,
    write_cells_csv,
    write_profile_csv,
    zeta_factors,
)

_BUILTIN_NAMES = ("sg2", "vicsek")


@dataclass(frozen=True)
class RunConfig:
    """Validated bundle of common run parameters."""

    structure_path: str
    depths: tuple[int, ...]
    family: str = "harmonic"
    weights: tuple[float, ...] | None = None
    mu: tuple[float, ...] | None = None
    tau_rank: float = 0.05
    mass_floor: float = DEFAULT_TOLERANCES.mass_floor
    seed: int = 0
    workers: int = 1
    out: str | None = None
    cells_out: str | None = None

    def __post_init__(self) -> None:
        if not self.depths:
            raise ValidationError("at least one depth is required")
        if any(n < 0 for n in self.depths):
            raise ValidationError("depths must be nonnegative")
        if not 0.0 < self.tau_rank < 1.0:
            raise ValidationError("--tau-rank must lie strictly between 0 and 1")
        if self.mass_floor <= 0.0:
            raise ValidationError("--mass-floor must be positive")
        if self.workers < 1:
            raise ValidationError("--workers must be at least 1")


# ---------------------------------------------------------------------------
# small parsers


def _parse_floats(text: str, what: str) -> tuple[float, ...]:
    try:
        return tuple(float(part) for part in text.split(","))
    except ValueError as exc:
        raise ParseError(f"{what} must be a comma-separated number list, got {text!r}") from exc


def _parse_depths(depth: int | None, depths: str | None) -> tuple[int, ...]:
    if depths is not None:
        m = re.fullmatch(r"(\d+)\.\.(\d+)", depths.strip())
        if not m:
            raise ParseError(f"--depths expects A..B, got {depths!r}")
        lo, hi = int(m.group(1)), int(m.group(2))
        if hi < lo:
            raise ParseError(f"--depths range is empty: {depths!r}")
        return tuple(range(lo, hi + 1))
    if depth is None:
        raise ParseError("one of --depth or --depths is required")
    return (depth,)


def resolve_structure(token: str) -> StructureSpec:
    """A builtin name or a path to a structure document."""
    if token in _BUILTIN_NAMES:
        return load_structure(builtin_structure_path(token))
    return load_structure(token)


def _load_function(hs: HarmonicStructure, token: str) -> PiecewiseHarmonic:
    """Function spec: 'file:PATH' (JSON with level and values) or a comma
    list of boundary values for a harmonic function."""
    if token.startswith("file:"):
        path = Path(token[len("file:") :])
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"function file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or "values" not in raw:
            raise ParseError(f"function file {path} needs 'level' and 'values'")
        level = int(raw.get("level", 0))
        return interpolate(hs, level, np.asarray(raw["values"], dtype=float))
    values = _parse_floats(token, "function values")
    return interpolate(hs, 0, np.asarray(values))


def _build_family(
    hs: HarmonicStructure, config: RunConfig, mean: MeanFunctional
) -> FunctionFamily:
    weights = np.asarray(config.weights, dtype=float) if config.weights else None
    if config.family == "harmonic":
        return harmonic_family(hs, mean, weights)
    if config.family == "level1":
        return level1_family(hs, mean, weights)
    if config.family.startswith("file:"):
        path = Path(config.family[len("file:") :])
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"family file {path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict) or "members" not in raw:
            raise ParseError(f"family file {path} needs 'level' and 'members'")
        level = int(raw.get("level", 0))
        return family_from_values(hs, level, raw["members"], weights, mean)
    raise ParseError(
        f"unknown family {config.family!r}; use harmonic, level1, or file:PATH"
    )


def _open_out(path: str | None):
    if path is None:
        return sys.stdout, False
    return open(path, "w", encoding="utf-8", newline=""), True


# ---------------------------------------------------------------------------
# polynomials for the chain-rule command


@dataclass(frozen=True)
class Polynomial:
    """Expanded multivariate polynomial over variables x1..xn."""

    nvars: int
    terms: tuple[tuple[float, tuple[int, ...]], ...]

    _FACTOR = re.compile(r"^x(\d+)(?:\^(\d+))?$")

    @classmethod
    def parse(cls, text: str, nvars: int) -> "Polynomial":
        src = text.replace(" ", "")
        if not src:
            raise ParseError("empty polynomial")
        # Shield exponent signs of float literals, then collapse sign runs
        # ("+ -3" and friends) so terms split cleanly on "+".
        src = src.replace("e+", "\x01").replace("e-", "\x02")
        src = src.replace("E+", "\x01").replace("E-", "\x02")
        while True:
            collapsed = (
                src.replace("++", "+")
                .replace("--", "+")
                .replace("+-", "-")
                .replace("-+", "-")
            )
            if collapsed == src:
                break
            src = collapsed
        chunks = src.replace("-", "+-").split("+")
        if chunks and chunks[0] == "":
            chunks = chunks[1:]
        terms: list[tuple[float, tuple[int, ...]]] = []
        for chunk in chunks:
            if not chunk or chunk == "-":
                raise ParseError(f"malformed polynomial {text!r}")
            coeff = 1.0
            if chunk.startswith("-"):
                coeff = -1.0
                chunk = chunk[1:]
            powers = [0] * nvars
            for factor in chunk.split("*"):
                factor = factor.replace("\x01", "e+").replace("\x02", "e-")
                m = cls._FACTOR.match(factor)
                if m:
                    idx = int(m.group(1))
                    if not 1 <= idx <= nvars:
                        raise ParseError(
                            f"variable x{idx} out of range (polynomial has {nvars} variables)"
                        )
                    powers[idx - 1] += int(m.group(2) or 1)
                    continue
                try:
                    coeff *= float(factor)
                except ValueError as exc:
                    raise ParseError(f"bad polynomial factor {factor!r}") from exc
            terms.append((coeff, tuple(powers)))
        return cls(nvars=nvars, terms=tuple(terms))

    def __call__(self, points: np.ndarray) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        out = np.zeros(points.shape[0])
        for coeff, powers in self.terms:
            term = np.full(points.shape[0], coeff)
            for var, p in enumerate(powers):
                if p:
                    term = term * points[:, var] ** p
            out += term
        return out

    def gradient(self) -> tuple["Polynomial", ...]:
        grads = []
        for var in range(self.nvars):
            terms = []
            for coeff, powers in self.terms:
                if powers[var] == 0:
                    continue
                lowered = list(powers)
                lowered[var] -= 1
                terms.append((coeff * powers[var], tuple(lowered)))
            grads.append(Polynomial(nvars=self.nvars, terms=tuple(terms)))
        return tuple(grads)


# ---------------------------------------------------------------------------
# subcommands


def _boundary_deletion_connected(spec: StructureSpec) -> list[tuple[str, bool]]:
    """Level-1 surrogate of the boundary-point deletion connectivity check:
    vertices of a common cell are mutually reachable, so the question is
    whether removing one boundary vertex disconnects the cell hypergraph."""
    table = spec.vertex_table(1)
    results = []
    for k, label in enumerate(spec.boundary):
        removed = int(table.boundary_ids[k])
        adj: dict[int, set[int]] = {}
        for row in table.slots:
            cell = [int(v) for v in row if int(v) != removed]
            for a in cell:
                adj.setdefault(a, set()).update(v for v in cell if v != a)
        vertices = set(adj)
        if not vertices:
            results.append((label, False))
            continue
        start = min(vertices)
        seen = {start}
        stack = [start]
        while stack:
            for nb in adj[stack.pop()]:
                if nb not in seen:
                    seen.add(nb)
                    stack.append(nb)
        expected = set(range(table.num_vertices)) - {removed}
        results.append((label, seen == expected))
    return results


def cmd_validate(args) -> int:
    spec = resolve_structure(args.structure)
    table1 = spec.vertex_table(1)
    print(
        f"structure: {spec.name or args.structure} "
        f"({spec.n_letters} letters, {spec.d} boundary vertices, |V_1| = {table1.num_vertices})"
    )
    hs = harmonic_structure(spec)
    print("laplacian: symmetric, nonpositive definite, kernel = constants, "
          "off-diagonal entries nonnegative")
    print(f"weights: {np.array2string(hs.weights, precision=10)}")
    print(f"fixed-point residual: {hs.residual:.3e} "
          f"(tolerance {DEFAULT_TOLERANCES.fixed_point:.0e})")
    checks = _boundary_deletion_connected(spec)
    for label, ok in checks:
        status = "connected" if ok else "DISCONNECTED"
        print(f"level-1 network without {label}: {status}")
    if not all(ok for _, ok in checks):
        raise ValidationError(
            "removing a boundary vertex disconnects the level-1 network"
        )
    for i in range(1, hs.d + 1):
        data = eigen_data(hs, i)
        spectrum = np.sort(np.abs(np.linalg.eigvals(hs.extensions[i - 1])))[::-1]
        print(
            f"letter {i}: r = {hs.weights[i - 1]:.12g}, "
            f"|spectrum| = {np.array2string(spectrum, precision=10)}, "
            f"energy mass = {data.energy_mass:.12g}, "
            f"second modulus = {data.second_modulus:.12g}"
        )
        print(f"  left  = {np.array2string(data.left, precision=10)}")
        print(f"  right = {np.array2string(data.right, precision=10)}")
    print("ok")
    return 0


def cmd_measure(args) -> int:
    config = RunConfig(
        structure_path=args.structure,
        depths=_parse_depths(args.depth, None),
        workers=args.workers,
        out=args.out,
    )
    spec = resolve_structure(args.structure)
    hs = harmonic_structure(spec)
    f = _load_function(hs, args.f)
    g = _load_function(hs, args.g) if args.g else None
    depth = config.depths[0]
    table = measure_table(f, g, depth, workers=config.workers)
    twice = 2.0 * energy(f, g if g is not None else f)
    scale = max(1.0, abs(twice))
    if abs(table.total - twice) > DEFAULT_TOLERANCES.consistency * scale:
        raise ValidationError(
            f"total mass {table.total!r} disagrees with twice the energy {twice!r}"
        )
    if depth >= 1:
        parent = measure_table(f, g, depth - 1, workers=config.workers)
        gap = float(np.abs(table.coarsen().masses - parent.masses).max())
        if gap > DEFAULT_TOLERANCES.consistency * max(1.0, float(np.abs(parent.masses).max())):
            raise ValidationError(
                f"refinement sums disagree with the parent table by {gap:.3g}"
            )
    handle, owns = _open_out(config.out)
    try:
        table.write_csv(handle)
    finally:
        if owns:
            handle.close()
    print(f"cells: {table.masses.size}, total mass: {table.total:.17g}", file=sys.stderr)
    return 0


def cmd_scan(args) -> int:
    config = RunConfig(
        structure_path=args.structure,
        depths=_parse_depths(args.depth, args.depths),
        family=args.family,
        weights=_parse_floats(args.weights, "--weights") if args.weights else None,
        mu=_parse_floats(args.mu, "--mu") if args.mu else None,
        tau_rank=args.tau_rank,
        mass_floor=args.mass_floor,
        seed=args.seed,
        workers=args.workers,
        out=args.out,
        cells_out=args.cells_out,
    )
    spec = resolve_structure(args.structure)
    hs = harmonic_structure(spec)
    mean = mean_functional(hs, np.asarray(config.mu) if config.mu else None)
    family = _build_family(hs, config, mean)
    profiles = []
    last = None
    for depth in config.depths:
        fld = density_matrices(
            family, depth, workers=config.workers, mass_floor=config.mass_floor
        )
        verify_field_invariants(fld)
        zeta = zeta_factors(fld)
        profile = rank_statistics(fld, config.tau_rank, zeta)
        profiles.append(profile)
        last = (fld, zeta, profile)
        print(
            f"depth {depth}: mean_lambda2 = {profile.mean_lambda2:.6e}, "
            f"mean_residual = {profile.mean_residual:.6e}, "
            f"dim_estimate = {profile.dim_estimate:.6f}, "
            f"skipped = {profile.skipped_cells}",
            file=sys.stderr,
        )
    handle, owns = _open_out(config.out)
    try:
        write_profile_csv(profiles, handle)
    finally:
        if owns:
            handle.close()
    fld, zeta, profile = last
    if config.cells_out:
        write_cells_csv(fld, zeta, config.cells_out)
    rounded = int(round(profile.dim_estimate))
    print(
        f"dimension estimate at depth {profile.depth}: {rounded} "
        f"(weighted mean {profile.dim_estimate:.6f}, "
        f"{profile.retained_cells} cells retained, {profile.skipped_cells} skipped)"
    )
    return 0


def cmd_embed(args) -> int:
    config = RunConfig(
        structure_path=args.structure,
        depths=_parse_depths(args.depth, None),
        family=args.family,
        weights=_parse_floats(args.weights, "--weights") if args.weights else None,
        mu=_parse_floats(args.mu, "--mu") if args.mu else None,
        mass_floor=args.mass_floor,
        workers=args.workers,
    )
    spec = resolve_structure(args.structure)
    hs = harmonic_structure(spec)
    mean = mean_functional(hs, np.asarray(config.mu) if config.mu else None)
    family = _build_family(hs, config, mean)
    k = family.size
    vertex_depth = args.vertex_depth if args.vertex_depth is not None else config.depths[0]
    cell_depth = config.depths[0]

    table = spec.vertex_table(vertex_depth)
    coords = np.column_stack([lift(m, vertex_depth).values for m in family.members])
    if not np.all(np.isfinite(coords)):
        raise NumericalError("vertex coordinates contain non-finite values")
    rounded = np.round(coords, 12)
    unique = {tuple(row) for row in rounded}
    if len(unique) < table.num_vertices:
        print(
            f"warning: coordinate map is not injective on V_{vertex_depth} "
            f"({table.num_vertices - len(unique)} coincidences)",
            file=sys.stderr,
        )

    fld = density_matrices(
        family, cell_depth, workers=config.workers, mass_floor=config.mass_floor
    )
    nu = fld.lam / fld.total_mass
    metric = fld.matrices * fld.total_mass
    if not np.all(np.isfinite(metric)):
        raise NumericalError("per-cell metric contains non-finite values")
    vals, vecs = np.linalg.eigh(metric)
    top = vecs[:, :, -1]
    lead = np.argmax(np.abs(top) > 1e-12, axis=1)
    signs = np.sign(top[np.arange(top.shape[0]), lead])
    signs[signs == 0.0] = 1.0
    top = top * signs[:, None]

    with open(args.vertices_out, "w", encoding="utf-8", newline="") as handle:
        handle.write("vertex," + ",".join(f"phi{j + 1}" for j in range(k)) + "\n")
        for v in range(table.num_vertices):
            row = ",".join(f"{coords[v, j]:.17g}" for j in range(k))
            handle.write(f"{v},{row}\n")
    with open(args.cells_out, "w", encoding="utf-8", newline="") as handle:
        zcols = ",".join(f"z{i + 1}_{j + 1}" for i in range(k) for j in range(k))
        dcols = ",".join(f"dir{j + 1}" for j in range(k))
        handle.write(f"word,nu,{zcols},{dcols}\n")
        for row in range(fld.size):
            word = format_word(fld.word(row))
            zvals = ",".join(f"{v:.17g}" for v in metric[row].ravel())
            dvals = ",".join(f"{v:.17g}" for v in top[row])
            handle.write(f"{word},{nu[row]:.17g},{zvals},{dvals}\n")
    print(
        f"vertices: {table.num_vertices} at depth {vertex_depth}; "
        f"cells: {fld.size} retained of {spec.n_letters ** cell_depth} "
        f"at depth {cell_depth}; total cell mass {float(np.sum(nu)):.12f}"
    )
    return 0


def cmd_chainrule(args) -> int:
    config = RunConfig(
        structure_path=args.structure,
        depths=_parse_depths(args.depth, args.depths),
        family=args.family,
        weights=_parse_floats(args.weights, "--weights") if args.weights else None,
        mu=_parse_floats(args.mu, "--mu") if args.mu else None,
        workers=args.workers,
        out=args.out,
    )
    spec = resolve_structure(args.structure)
    hs = harmonic_structure(spec)
    mean = mean_functional(hs, np.asarray(config.mu) if config.mu else None)
    family = _build_family(hs, config, mean)
    k = family.size
    poly = Polynomial.parse(args.G, k)
    grads = poly.gradient()

    rows = []
    for depth in config.depths:
        table = spec.vertex_table(depth)
        coords = np.column_stack([lift(m, depth).values for m in family.members])
        g_values = poly(coords)
        inv = _weight_products(1.0 / hs.weights, depth)
        lhs = graph_energy(table.slots, inv, hs.laplacian, g_values)

        reps = table.slots.min(axis=1)
        rep_points = coords[reps]
        grad_values = np.column_stack([g(rep_points) for g in grads])
        rhs_parts = []
        for start, gram in scan_cell_masses(hs, family.members, depth, config.workers):
            stop = start + gram.shape[0]
            gv = grad_values[start:stop]
            rhs_parts.append(
                0.5 * float(np.sum(np.einsum("ci,cij,cj->c", gv, gram, gv, optimize=False)))
            )
        rhs = float(np.sum(np.asarray(rhs_parts)))
        if rhs <= 0.0:
            raise ValidationError(
                f"degenerate quadratic form at depth {depth}: right side is {rhs!r}"
            )
        gap = abs(lhs - rhs) / rhs
        rows.append((depth, lhs, rhs, gap))
        print(f"depth {depth}: lhs = {lhs:.12g}, rhs = {rhs:.12g}, rel_gap = {gap:.6e}")
    if config.out:
        with open(config.out, "w", encoding="utf-8", newline="") as handle:
            handle.write("depth,lhs,rhs,rel_gap\n")
            for depth, lhs, rhs, gap in rows:
                handle.write(f"{depth},{lhs:.17g},{rhs:.17g},{gap:.17g}\n")
    return 0


# ---------------------------------------------------------------------------
# wiring


def _add_common(sub: argparse.ArgumentParser, family: bool = True) -> None:
    sub.add_argument("--structure", required=True,
                     help="builtin name (sg2, vicsek) or path to a structure JSON")
    sub.add_argument("--workers", type=int, default=1)
    if family:
        sub.add_argument("--family", default="harmonic",
                         help="harmonic | level1 | file:PATH")
        sub.add_argument("--weights", default=None,
                         help="comma-separated family weights a_i (default uniform)")
        sub.add_argument("--mu", default=None,
                         help="comma-separated reference measure weights (default uniform)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fracform",
        description="Dirichlet-form energy measures and rank diagnostics "
                    "on p.c.f. self-similar sets",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("validate", help="check a structure and its harmonic pair")
    p.add_argument("--structure", required=True)
    p.set_defaults(func=cmd_validate)

    p = subs.add_parser("measure", help="emit the cell-mass CSV of a function pair")
    _add_common(p, family=False)
    p.add_argument("--f", required=True, help="boundary values 'a,b,c' or file:PATH")
    p.add_argument("--g", default=None, help="second function (defaults to f)")
    p.add_argument("--depth", type=int, required=True)
    p.add_argument("--out", default=None, help="CSV path (stdout when omitted)")
    p.set_defaults(func=cmd_measure)

    p = subs.add_parser("scan", help="rank diagnostics over a depth range")
    _add_common(p)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--depths", default=None, help="inclusive range A..B")
    p.add_argument("--tau-rank", type=float, default=0.05, dest="tau_rank")
    p.add_argument("--mass-floor", type=float,
                   default=DEFAULT_TOLERANCES.mass_floor, dest="mass_floor")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="profile CSV path (stdout when omitted)")
    p.add_argument("--cells-out", default=None, dest="cells_out",
                   help="per-cell CSV at the deepest level")
    p.set_defaults(func=cmd_scan)

    p = subs.add_parser("embed", help="vertex coordinates and per-cell metric CSVs")
    _add_common(p)
    p.add_argument("--depth", type=int, required=True, help="cell depth")
    p.add_argument("--vertex-depth", type=int, default=None, dest="vertex_depth")
    p.add_argument("--mass-floor", type=float,
                   default=DEFAULT_TOLERANCES.mass_floor, dest="mass_floor")
    p.add_argument("--vertices-out", required=True, dest="vertices_out")
    p.add_argument("--cells-out", required=True, dest="cells_out")
    p.set_defaults(func=cmd_embed)

    p = subs.add_parser("chainrule", help="discrete chain-rule convergence report")
    _add_common(p)
    p.add_argument("--G", required=True, help="polynomial in x1..xk, e.g. 'x1^2'")
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--depths", default=None, help="inclusive range A..B")
    p.add_argument("--out", default=None, help="optional CSV path")
    p.set_defaults(func=cmd_chainrule)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FracformError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
