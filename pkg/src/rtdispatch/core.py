"""Spatial grid, fleet and incident types, and the euclidean base policy."""
import csv
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import FormatError, InvalidRegion, InvalidTransition, OutOfRegion

EARTH_RADIUS_M = 6371008.8
METERS_PER_MILE = 1609.344
_DEG = math.pi / 180.0
_EDGE_EPS = 1e-9


def equirectangular_m(a, b):
    """Straight-line distance in meters between two (lat, lon) points."""
    lat1, lon1 = a
    lat2, lon2 = b
    x = (lon2 - lon1) * _DEG * math.cos(0.5 * (lat1 + lat2) * _DEG)
    y = (lat2 - lat1) * _DEG
    return EARTH_RADIUS_M * math.hypot(x, y)


@dataclass(frozen=True)
class BBox:
    lat_min: float
    lon_min: float
    lat_max: float
    lon_max: float

    def contains(self, point):
        lat, lon = point
        return (self.lat_min <= lat <= self.lat_max
                and self.lon_min <= lon <= self.lon_max)


class Projection:
    """Equirectangular projection to meters about the bbox's SW corner."""

    def __init__(self, bbox):
        self.lat0 = bbox.lat_min
        self.lon0 = bbox.lon_min
        mid = 0.5 * (bbox.lat_min + bbox.lat_max)
        self.kx = EARTH_RADIUS_M * _DEG * math.cos(mid * _DEG)
        self.ky = EARTH_RADIUS_M * _DEG

    def forward(self, lat, lon):
        return (lon - self.lon0) * self.kx, (lat - self.lat0) * self.ky

    def inverse(self, x, y):
        return self.lat0 + y / self.ky, self.lon0 + x / self.kx


@dataclass(frozen=True)
class GridCell:
    id: int
    centroid: tuple
    neighbor_ids: tuple


class Grid(Sequence):
    """Axis-aligned tiling of a bbox into square cells.

    Cell ids run row-major from the south-west corner. Cells are closed on
    their low side only for the first row/column, so a point on a shared
    boundary belongs to the lower-id cell.
    """

    def __init__(self, bbox, cell_size):
        self.bbox = bbox
        self.cell_size = float(cell_size)
        self.projection = Projection(bbox)
        self.width, self.height = self.projection.forward(bbox.lat_max, bbox.lon_max)
        self.ncols = max(1, math.ceil(self.width / self.cell_size - _EDGE_EPS))
        self.nrows = max(1, math.ceil(self.height / self.cell_size - _EDGE_EPS))
        self._cells = [self._make_cell(i) for i in range(self.ncols * self.nrows)]

    def _make_cell(self, cid):
        row, col = divmod(cid, self.ncols)
        x0, x1 = col * self.cell_size, min((col + 1) * self.cell_size, self.width)
        y0, y1 = row * self.cell_size, min((row + 1) * self.cell_size, self.height)
        centroid = self.projection.inverse(0.5 * (x0 + x1), 0.5 * (y0 + y1))
        nbrs = []
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                r, c = row + dr, col + dc
                if (dr or dc) and 0 <= r < self.nrows and 0 <= c < self.ncols:
                    nbrs.append(r * self.ncols + c)
        return GridCell(cid, centroid, tuple(sorted(nbrs)))

    def __len__(self):
        return len(self._cells)

    def __getitem__(self, i):
        return self._cells[i]

    def _index(self, coord, n):
        q = coord / self.cell_size
        nearest = round(q)
        if abs(q - nearest) < _EDGE_EPS:
            q = nearest
        return min(max(math.ceil(q) - 1, 0), n - 1)

    def cell_of(self, point):
        if not self.bbox.contains(point):
            raise OutOfRegion(f"point {point} outside {self.bbox}")
        x, y = self.projection.forward(*point)
        return self._index(y, self.nrows) * self.ncols + self._index(x, self.ncols)

    def centroids(self):
        return np.array([c.centroid for c in self._cells])


def build_grid(bbox, cell_size):
    if cell_size <= 0:
        raise InvalidRegion("cell_size must be positive")
    if not isinstance(bbox, BBox):
        bbox = BBox(*bbox)
    if not (bbox.lat_max > bbox.lat_min and bbox.lon_max > bbox.lon_min):
        raise InvalidRegion(f"degenerate bbox {bbox}")
    return Grid(bbox, cell_size)


def grid_of(point, grid):
    return grid.cell_of(point)


@dataclass(frozen=True)
class Depot:
    id: int
    grid_id: int
    location: tuple


class Status(str, Enum):
    IDLE = "IdleAtDepot"
    EN_ROUTE = "EnRouteToIncident"
    SERVICING = "Servicing"
    RETURNING = "ReturningToDepot"


_ALLOWED = {
    Status.IDLE: {Status.EN_ROUTE},
    Status.EN_ROUTE: {Status.SERVICING},
    Status.SERVICING: {Status.RETURNING, Status.EN_ROUTE},
    Status.RETURNING: {Status.IDLE, Status.EN_ROUTE},
}


def check_transition(old, new):
    if new not in _ALLOWED[old]:
        raise InvalidTransition(f"{old.value} -> {new.value}")


@dataclass(frozen=True)
class Responder:
    """Snapshot of one responder.

    ``location`` is where the current leg started (``since``); ``target`` is
    where it ends (``busy_until``). Idle responders sit at their depot.
    """
    id: int
    home_depot: int
    depot_location: tuple
    status: Status = Status.IDLE
    location: tuple = None
    since: float = 0.0
    busy_until: float = 0.0
    target: Optional[tuple] = None

    def __post_init__(self):
        if self.location is None:
            object.__setattr__(self, "location", self.depot_location)

    @property
    def is_free(self):
        return self.status in (Status.IDLE, Status.RETURNING)

    def location_at(self, t):
        if self.status is Status.SERVICING or self.target is None:
            return self.location
        if self.status is Status.IDLE:
            return self.depot_location
        span = self.busy_until - self.since
        frac = 1.0 if span <= 0 else min(max((t - self.since) / span, 0.0), 1.0)
        (a_lat, a_lon), (b_lat, b_lon) = self.location, self.target
        return (a_lat + frac * (b_lat - a_lat), a_lon + frac * (b_lon - a_lon))

    def moved(self, status, now, busy_until, target=None, location=None):
        """Return a copy in ``status``; the transition must be legal."""
        check_transition(self.status, status)
        if location is None:
            location = self.location_at(now)
        if status is Status.IDLE:
            location, target = self.depot_location, None
        return replace(self, status=status, location=location, since=now,
                       busy_until=busy_until, target=target)


@dataclass(frozen=True)
class Incident:
    id: int
    grid_id: int
    occurred_at: float
    location: tuple
    features: object = field(default=None, compare=False, repr=False)
    weather: Optional[tuple] = field(default=None, compare=False)


def nearest_euclidean(responders, incident, now=None):
    """Id of the free responder closest to ``incident`` as the crow flies.

    Ties go to the lower id; ``None`` when nobody is free.
    """
    best = None
    for r in responders:
        if not r.is_free:
            continue
        loc = r.location if now is None else r.location_at(now)
        key = (equirectangular_m(loc, incident.location), r.id)
        if best is None or key < best:
            best = key
    return None if best is None else best[1]


def load_fleet(path, grid=None):
    """Read depots and responders from a CSV with ``id,lat,lon,depot_id``.

    A depot takes the location of its first listed responder.
    """
    depots, responders = {}, []
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            missing = {"id", "lat", "lon", "depot_id"} - set(reader.fieldnames or ())
            if missing:
                raise FormatError(f"{path}: missing columns {sorted(missing)}")
            for lineno, row in enumerate(reader, start=2):
                try:
                    rid, did = int(row["id"]), int(row["depot_id"])
                    loc = (float(row["lat"]), float(row["lon"]))
                except (TypeError, ValueError) as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
                if did not in depots:
                    gid = grid.cell_of(loc) if grid is not None else -1
                    depots[did] = Depot(did, gid, loc)
                responders.append(Responder(rid, did, depots[did].location))
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    return list(depots.values()), responders


def write_fleet(path, depots, responders):
    locs = {d.id: d.location for d in depots}
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "lat", "lon", "depot_id"])
        for r in responders:
            lat, lon = locs[r.home_depot]
            w.writerow([r.id, repr(lat), repr(lon), r.home_depot])
