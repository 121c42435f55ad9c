"""Spatial weight matrices from capital-city coordinates or GAL neighbour files.

Builders return a :class:`NeighborList` holding raw (unstandardised) weights.
Units without neighbours are allowed at that stage so they can be reported
and patched; :func:`row_standardize` refuses them.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import sparse

from .errors import ConfigurationError, IslandError, ParseError

# IUGG mean Earth radius
EARTH_RADIUS_KM = 6371.0088

ROW_SUM_TOL = 1e-12


@dataclass(frozen=True)
class GeoPoint:
    unit_id: str
    lat: float
    lon: float

    def __post_init__(self):
        if not self.unit_id or any(c.isspace() for c in self.unit_id):
            raise ConfigurationError(f"invalid unit_id {self.unit_id!r}")
        if not -90.0 <= self.lat <= 90.0:
            raise ConfigurationError(f"{self.unit_id}: latitude {self.lat} out of range")
        if not -180.0 < self.lon <= 180.0:
            raise ConfigurationError(f"{self.unit_id}: longitude {self.lon} out of range")


@dataclass(frozen=True)
class IslandPatch:
    """Manual neighbours for a unit that has none under some contiguity rule.

    ``distances_km`` switches the patch to inverse-distance weights
    (1/km per added neighbour); leave it ``None`` for binary links.
    """

    island: str
    neighbors: tuple[str, ...]
    distances_km: tuple[float, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        if not self.neighbors:
            raise ConfigurationError(f"patch for {self.island} adds no neighbours")
        if self.distances_km is not None:
            object.__setattr__(self, "distances_km", tuple(float(d) for d in self.distances_km))
            if len(self.distances_km) != len(self.neighbors):
                raise ConfigurationError(
                    f"patch for {self.island}: {len(self.neighbors)} neighbours but "
                    f"{len(self.distances_km)} distances"
                )
            if any(not d > 0 for d in self.distances_km):
                raise ConfigurationError(f"patch for {self.island}: distances must be > 0")

    def weights(self) -> tuple[float, ...]:
        if self.distances_km is None:
            return (1.0,) * len(self.neighbors)
        return tuple(1.0 / d for d in self.distances_km)


@dataclass(frozen=True)
class NeighborList:
    unit_ids: tuple[str, ...]
    entries: tuple[tuple[tuple[int, float], ...], ...]
    builder_tag: str
    patches: tuple[IslandPatch, ...] = ()
    patched_links: frozenset[tuple[int, int]] = frozenset()
    dataset_name: str = "dataset"
    id_field: str = "unit_id"

    def __post_init__(self):
        n = len(self.unit_ids)
        if len(self.entries) != n:
            raise ConfigurationError(f"{len(self.entries)} entry rows for {n} units")
        if len(set(self.unit_ids)) != n:
            raise ConfigurationError("duplicate unit ids")
        for i, row in enumerate(self.entries):
            seen = set()
            for j, w in row:
                if j == i:
                    raise ConfigurationError(f"{self.unit_ids[i]} lists itself as a neighbour")
                if not 0 <= j < n:
                    raise ConfigurationError(f"neighbour index {j} out of range")
                if j in seen:
                    raise ConfigurationError(
                        f"{self.unit_ids[i]} lists {self.unit_ids[j]} twice"
                    )
                if w < 0:
                    raise ConfigurationError("negative raw weight")
                seen.add(j)

    @property
    def n(self) -> int:
        return len(self.unit_ids)

    @property
    def n_links(self) -> int:
        return sum(len(row) for row in self.entries)

    def degrees(self) -> np.ndarray:
        return np.array([len(row) for row in self.entries], dtype=int)

    def islands(self) -> list[str]:
        return [self.unit_ids[i] for i, row in enumerate(self.entries) if not row]

    def is_binary(self) -> bool:
        return all(w == 1.0 for row in self.entries for _, w in row)

    def index(self) -> dict[str, int]:
        return {u: i for i, u in enumerate(self.unit_ids)}

    def to_dense(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        for i, row in enumerate(self.entries):
            for j, w in row:
                W[i, j] = w
        return W


@dataclass(frozen=True)
class WeightMatrix:
    unit_ids: tuple[str, ...]
    rows: tuple[tuple[tuple[int, float], ...], ...]
    standardized: bool
    name: str = ""
    builder_tag: str = ""
    patches: tuple[IslandPatch, ...] = field(default=(), compare=False)

    def __post_init__(self):
        for i, row in enumerate(self.rows):
            if any(not w > 0 for _, w in row):
                raise ConfigurationError(f"row {self.unit_ids[i]} has non-positive weights")
            if self.standardized:
                if not row:
                    raise IslandError([self.unit_ids[i]])
                s = math.fsum(w for _, w in row)
                if abs(s - 1.0) > ROW_SUM_TOL:
                    raise ConfigurationError(f"row {self.unit_ids[i]} sums to {s!r}")

    @property
    def n(self) -> int:
        return len(self.unit_ids)

    def to_dense(self) -> np.ndarray:
        W = np.zeros((self.n, self.n))
        for i, row in enumerate(self.rows):
            for j, w in row:
                W[i, j] = w
        return W

    def to_sparse(self) -> sparse.csr_matrix:
        ii = [i for i, row in enumerate(self.rows) for _ in row]
        jj = [j for row in self.rows for j, _ in row]
        ww = [w for row in self.rows for _, w in row]
        return sparse.csr_matrix((ww, (ii, jj)), shape=(self.n, self.n))

    def neighbor_list(self) -> NeighborList:
        return NeighborList(self.unit_ids, self.rows, self.builder_tag or self.name, self.patches)


@dataclass(frozen=True)
class MatrixStats:
    min_links: int
    max_links: int
    avg_links: float
    pct_nonzero: float

    def row(self) -> tuple[str, str, str, str]:
        """Link counts as integers, average trimmed to 2 dp, percentage to 2 dp."""
        avg = f"{self.avg_links:.2f}".rstrip("0").rstrip(".")
        return (str(self.min_links), str(self.max_links), avg, f"{self.pct_nonzero:.2f}")


# ---------------------------------------------------------------------------
# distances


def great_circle_km(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance on a sphere of radius :data:`EARTH_RADIUS_KM`."""
    lat1, lon1, lat2, lon2 = map(math.radians, (a.lat, a.lon, b.lat, b.lon))
    h = (math.sin((lat2 - lat1) / 2.0) ** 2
         + math.cos(lat1) * math.cos(lat2) * math.sin((lon2 - lon1) / 2.0) ** 2)
    return 2.0 * EARTH_RADIUS_KM * math.asin(math.sqrt(min(1.0, h)))


def distance_matrix(points: Sequence[GeoPoint]) -> np.ndarray:
    lat = np.radians([p.lat for p in points])
    lon = np.radians([p.lon for p in points])
    dlat = lat[None, :] - lat[:, None]
    dlon = lon[None, :] - lon[:, None]
    h = np.sin(dlat / 2.0) ** 2 + np.cos(lat)[:, None] * np.cos(lat)[None, :] * np.sin(dlon / 2.0) ** 2
    D = 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.minimum(h, 1.0)))
    # exact symmetry regardless of evaluation order
    D = np.triu(D, 1)
    return D + D.T


def _check_points(points: Sequence[GeoPoint]) -> None:
    ids = [p.unit_id for p in points]
    if len(set(ids)) != len(ids):
        dup = sorted({u for u in ids if ids.count(u) > 1})
        raise ConfigurationError("duplicate unit ids: " + ", ".join(dup))
    seen: dict[tuple[float, float], str] = {}
    for p in points:
        key = (p.lat, p.lon)
        if key in seen:
            raise ConfigurationError(
                f"units {seen[key]} and {p.unit_id} share coordinates {key}"
            )
        seen[key] = p.unit_id


# ---------------------------------------------------------------------------
# builders


def build_knn(points: Sequence[GeoPoint], k: int) -> NeighborList:
    """Link each unit to its ``k`` nearest units (binary weights).

    Equal distances are resolved by ascending unit id so that the result is
    reproducible.
    """
    n = len(points)
    if not isinstance(k, (int, np.integer)) or k < 1:
        raise ConfigurationError(f"k must be a positive integer, got {k!r}")
    if k >= n:
        raise ConfigurationError(f"k={k} needs more than {n} units")
    _check_points(points)
    D = distance_matrix(points)
    ids = [p.unit_id for p in points]
    entries = []
    for i in range(n):
        order = sorted((j for j in range(n) if j != i), key=lambda j: (D[i, j], ids[j]))
        entries.append(tuple((j, 1.0) for j in order[:k]))
    return NeighborList(tuple(ids), tuple(entries), f"knn({k})")


def build_distance_band(points: Sequence[GeoPoint], d_max_km: float, inverse: bool = False) -> NeighborList:
    """Link units whose distance is strictly below ``d_max_km``.

    Weights are 1, or 1/distance when ``inverse``. Units left without links
    are kept and show up in :meth:`NeighborList.islands`.
    """
    if not d_max_km > 0:
        raise ConfigurationError(f"d_max_km must be positive, got {d_max_km!r}")
    _check_points(points)
    D = distance_matrix(points)
    n = len(points)
    entries = []
    for i in range(n):
        row = []
        for j in range(n):
            if j != i and D[i, j] < d_max_km:
                row.append((j, 1.0 / D[i, j] if inverse else 1.0))
        entries.append(tuple(row))
    tag = f"inverse-band({d_max_km:g})" if inverse else f"band({d_max_km:g})"
    return NeighborList(tuple(p.unit_id for p in points), tuple(entries), tag)


def apply_island_patches(nl: NeighborList, patches: Iterable[IslandPatch], force: bool = False) -> NeighborList:
    """Add manual links for neighbourless units, in both directions.

    Island status is judged on ``nl`` as given, so reciprocal patches
    (Australia->New Zealand, New Zealand->Australia) are accepted together.
    Links already present are left untouched.
    """
    patches = tuple(patches)
    if not patches:
        return nl
    idx = nl.index()
    islands = set(nl.islands())
    rows = [dict(row) for row in nl.entries]
    order = [[j for j, _ in row] for row in nl.entries]
    patched = set(nl.patched_links)
    for patch in patches:
        unknown = [u for u in (patch.island, *patch.neighbors) if u not in idx]
        if unknown:
            raise ConfigurationError("patch refers to unknown units: " + ", ".join(unknown))
        if patch.island not in islands and not force:
            raise ConfigurationError(
                f"{patch.island} already has neighbours; pass force=True to patch it anyway"
            )
        i = idx[patch.island]
        for nb, w in zip(patch.neighbors, patch.weights()):
            j = idx[nb]
            if j == i:
                raise ConfigurationError(f"patch links {nb} to itself")
            for a, b in ((i, j), (j, i)):
                if b not in rows[a]:
                    rows[a][b] = w
                    order[a].append(b)
                    patched.add((a, b))
    entries = tuple(tuple((j, rows[i][j]) for j in order[i]) for i in range(nl.n))
    return replace(nl, entries=entries, patches=nl.patches + patches, patched_links=frozenset(patched))


def validate_no_islands(nl: NeighborList, hint: str | None = None) -> None:
    islands = nl.islands()
    if islands:
        raise IslandError(islands, hint)


def row_standardize(nl: NeighborList, name: str = "") -> WeightMatrix:
    validate_no_islands(nl)
    rows = []
    for row in nl.entries:
        total = math.fsum(w for _, w in row)
        if not total > 0:
            raise ConfigurationError("row with zero total weight")
        rows.append(tuple((j, w / total) for j, w in row))
    return WeightMatrix(nl.unit_ids, tuple(rows), True, name=name or nl.builder_tag,
                        builder_tag=nl.builder_tag, patches=nl.patches)


def matrix_stats(nl: NeighborList | WeightMatrix) -> MatrixStats:
    rows = nl.entries if isinstance(nl, NeighborList) else nl.rows
    deg = np.array([len(r) for r in rows])
    n = len(rows)
    total = int(deg.sum())
    return MatrixStats(int(deg.min()), int(deg.max()), total / n, 100.0 * total / n**2)


# ---------------------------------------------------------------------------
# GAL files


def parse_neighbor_file(text: str, weights_csv: str | None = None,
                        unit_ids: Sequence[str] | None = None,
                        builder_tag: str = "queen-file") -> NeighborList:
    """Read GeoDa GAL text.

    ``unit_ids`` fixes the row order (e.g. the coordinates file order); by
    default units are ordered as their records appear. ``weights_csv`` is the
    ``unit_id,neighbor_id,weight_raw`` sidecar for non-binary matrices.
    """
    lines = text.splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if not lines:
        raise ParseError("empty file", 1)
    head = lines[0].split()
    if len(head) == 4 and head[0] == "0":
        n_str, dataset_name, id_field = head[1], head[2], head[3]
    elif len(head) == 1:
        n_str, dataset_name, id_field = head[0], "dataset", "unit_id"
    else:
        raise ParseError(f"malformed header {lines[0]!r}", 1)
    try:
        n = int(n_str)
    except ValueError:
        raise ParseError(f"unit count {n_str!r} is not an integer", 1) from None
    if n < 1:
        raise ParseError("unit count must be positive", 1)

    records: list[tuple[str, list[str], int]] = []
    pos = 1
    while pos < len(lines):
        rec_line = pos + 1
        parts = lines[pos].split()
        if len(parts) != 2:
            raise ParseError(f"expected '<unit_id> <neighbor_count>', got {lines[pos]!r}", rec_line)
        uid, cnt = parts
        try:
            count = int(cnt)
        except ValueError:
            raise ParseError(f"neighbour count {cnt!r} is not an integer", rec_line) from None
        if count < 0:
            raise ParseError("negative neighbour count", rec_line)
        if pos + 1 < len(lines):
            nbrs = lines[pos + 1].split()
            pos += 2
        elif count == 0:
            nbrs = []
            pos += 1
        else:
            raise ParseError(f"{uid}: missing neighbour line", rec_line)
        if len(nbrs) != count:
            raise ParseError(f"{uid} declares {count} neighbours but lists {len(nbrs)}", rec_line)
        records.append((uid, nbrs, rec_line))

    if len(records) != n:
        raise ParseError(f"header declares {n} units but file has {len(records)} records", 1)
    file_ids = [r[0] for r in records]
    if len(set(file_ids)) != n:
        raise ParseError("duplicate unit records", 1)
    if unit_ids is None:
        ids = tuple(file_ids)
    else:
        ids = tuple(unit_ids)
        if set(ids) != set(file_ids):
            missing = sorted(set(ids) ^ set(file_ids))
            raise ParseError("unit ids differ from the expected set: " + ", ".join(missing), 1)
    idx = {u: i for i, u in enumerate(ids)}

    weights: dict[tuple[str, str], float] = {}
    if weights_csv is not None:
        reader = csv.DictReader(io.StringIO(weights_csv))
        if reader.fieldnames != ["unit_id", "neighbor_id", "weight_raw"]:
            raise ParseError("weights sidecar needs header unit_id,neighbor_id,weight_raw", 1)
        for lineno, rec in enumerate(reader, start=2):
            try:
                weights[(rec["unit_id"], rec["neighbor_id"])] = float(rec["weight_raw"])
            except (TypeError, ValueError):
                raise ParseError("bad weight row in sidecar", lineno) from None

    entries: list[tuple[tuple[int, float], ...]] = [()] * n
    for uid, nbrs, rec_line in records:
        row = []
        for nb in nbrs:
            if nb not in idx:
                raise ParseError(f"{uid} lists unknown unit {nb!r}", rec_line + 1)
            if nb == uid:
                raise ParseError(f"{uid} lists itself", rec_line + 1)
            if weights_csv is not None:
                if (uid, nb) not in weights:
                    raise ParseError(f"no sidecar weight for {uid}->{nb}", rec_line + 1)
                w = weights[(uid, nb)]
            else:
                w = 1.0
            row.append((idx[nb], w))
        entries[idx[uid]] = tuple(row)
    try:
        return NeighborList(ids, tuple(entries), builder_tag,
                            dataset_name=dataset_name, id_field=id_field)
    except ConfigurationError as exc:
        raise ParseError(str(exc)) from exc


def serialize_neighbor_file(nl: NeighborList) -> str:
    out = [f"0 {nl.n} {nl.dataset_name} {nl.id_field}"]
    for uid, row in zip(nl.unit_ids, nl.entries):
        out.append(f"{uid} {len(row)}")
        out.append(" ".join(nl.unit_ids[j] for j, _ in row))
    return "\n".join(out) + "\n"


def serialize_weights_csv(nl: NeighborList) -> str | None:
    """Sidecar with raw weights, or ``None`` for binary matrices."""
    if nl.is_binary():
        return None
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["unit_id", "neighbor_id", "weight_raw"])
    for uid, row in zip(nl.unit_ids, nl.entries):
        for j, w in row:
            writer.writerow([uid, nl.unit_ids[j], repr(float(w))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# auxiliary files


def read_coordinates(path: str | Path) -> list[GeoPoint]:
    """Read a ``unit_id,lat,lon`` CSV."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) < {"unit_id", "lat", "lon"}:
            raise ConfigurationError(f"{path}: expected header unit_id,lat,lon")
        points = []
        for lineno, rec in enumerate(reader, start=2):
            try:
                points.append(GeoPoint(rec["unit_id"].strip(), float(rec["lat"]), float(rec["lon"])))
            except (TypeError, ValueError) as exc:
                raise ParseError(f"{path}: {exc}", lineno) from None
    _check_points(points)
    return points


def read_patches(path: str | Path) -> list[IslandPatch]:
    """Read a JSON list of ``{"island", "neighbors", "distances_km"?}`` records."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ConfigurationError(f"{path}: expected a JSON list of patches")
    try:
        return [IslandPatch(r["island"], tuple(r["neighbors"]), r.get("distances_km")) for r in raw]
    except (KeyError, TypeError) as exc:
        raise ConfigurationError(f"{path}: bad patch record ({exc})") from None
