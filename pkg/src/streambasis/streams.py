"""Record streams: attribute schemas, unit interning, windowing, discretization.

A stream is a chronological sequence of multi-attribute records. Every
attribute value is interned to a dense per-attribute unit id at first
sight; continuous attributes (coordinates, timestamps) are discretized
to grid/bin symbols before interning.
"""

from __future__ import annotations

import csv
import math
import re
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Iterable, Iterator, NamedTuple, Sequence

METERS_PER_DEGREE = 111320.0

KIND_CATEGORICAL = "categorical"
KIND_SET = "set"
KIND_TEXT = "text"
KIND_LOCATION = "location"
KIND_TIMEBIN = "timebin"

VALID_KINDS = (KIND_CATEGORICAL, KIND_SET, KIND_TEXT, KIND_LOCATION, KIND_TIMEBIN)

_TOKEN_SPLIT = re.compile(r"[^0-9a-z]+")


class ConfigError(ValueError):
    """Raised for invalid schema/config declarations (fatal at startup)."""


class InvalidCoordinateError(ValueError):
    """Raised when a latitude/longitude pair is outside the valid range."""


class Unit(NamedTuple):
    """One interned attribute value: the thing that gets an embedding."""

    attribute_id: int
    unit_id: int


@dataclass(frozen=True)
class AttributeSchema:
    """Declaration of one attribute of the stream.

    ``attribute_id`` values are contiguous from 0 and unique per stream;
    ``kind`` is fixed for the stream's lifetime.
    """

    attribute_id: int
    name: str
    kind: str
    column: str | None = None
    lat_column: str | None = None
    lon_column: str | None = None
    origin: tuple[float, float] = (0.0, 0.0)
    cell_meters: float = 300.0
    granularity: float = 3600.0

    def __post_init__(self) -> None:
        if self.kind not in VALID_KINDS:
            raise ConfigError(f"unknown attribute kind {self.kind!r} for {self.name!r}")
        if self.kind == KIND_LOCATION:
            if not (self.lat_column and self.lon_column):
                raise ConfigError(f"location attribute {self.name!r} needs lat/lon columns")
            if self.cell_meters <= 0:
                raise ConfigError(f"location attribute {self.name!r} needs cell_meters > 0")
        elif self.kind == KIND_TIMEBIN:
            if self.granularity <= 0:
                raise ConfigError(f"timebin attribute {self.name!r} needs granularity > 0")
            if not self.column:
                raise ConfigError(f"timebin attribute {self.name!r} needs a column")
        elif not self.column:
            raise ConfigError(f"attribute {self.name!r} needs a column")

    @property
    def set_valued(self) -> bool:
        return self.kind in (KIND_SET, KIND_TEXT)


@dataclass
class Record:
    """One stream event: a timestamp plus its interned unit occurrences."""

    timestamp: float
    units: tuple[Unit, ...]


@dataclass
class UpdatingWindow:
    """A half-open time slice [start, start + width) of the stream."""

    window_id: int
    start: float
    width: float
    records: list[Record] = field(default_factory=list)

    @property
    def end(self) -> float:
        return self.start + self.width

    def distinct_units(self) -> list[Unit]:
        seen: dict[Unit, None] = {}
        for record in self.records:
            for unit in record.units:
                seen.setdefault(unit)
        return list(seen)


class VocabRegistry:
    """Per-attribute interning of symbols to dense, first-seen unit ids.

    Reads of committed ids are safe from any thread; mutation takes an
    exclusive lock so parallel workers can resolve ids without races.
    """

    def __init__(self, n_attributes: int) -> None:
        self._symbol_to_id: list[dict[str, int]] = [{} for _ in range(n_attributes)]
        self._id_to_symbol: list[list[str]] = [[] for _ in range(n_attributes)]
        self._lock = threading.Lock()

    def __getstate__(self) -> dict:
        return {"symbols": self._id_to_symbol}

    def __setstate__(self, state: dict) -> None:
        self._id_to_symbol = [list(symbols) for symbols in state["symbols"]]
        self._symbol_to_id = [
            {s: i for i, s in enumerate(symbols)} for symbols in self._id_to_symbol
        ]
        self._lock = threading.Lock()

    @property
    def n_attributes(self) -> int:
        return len(self._symbol_to_id)

    def intern(self, attribute_id: int, symbol: str) -> int:
        table = self._symbol_to_id[attribute_id]
        existing = table.get(symbol)
        if existing is not None:
            return existing
        with self._lock:
            existing = table.get(symbol)
            if existing is not None:
                return existing
            unit_id = len(self._id_to_symbol[attribute_id])
            table[symbol] = unit_id
            self._id_to_symbol[attribute_id].append(symbol)
            return unit_id

    def lookup(self, attribute_id: int, symbol: str) -> int | None:
        return self._symbol_to_id[attribute_id].get(symbol)

    def symbol(self, attribute_id: int, unit_id: int) -> str:
        return self._id_to_symbol[attribute_id][unit_id]

    def size(self, attribute_id: int) -> int:
        return len(self._id_to_symbol[attribute_id])

    def sizes(self) -> list[int]:
        return [len(symbols) for symbols in self._id_to_symbol]

    def symbols(self, attribute_id: int) -> list[str]:
        return list(self._id_to_symbol[attribute_id])

    def restore(self, attribute_id: int, symbols: Sequence[str]) -> None:
        """Re-seed an attribute's vocabulary in unit-id order (model load)."""
        with self._lock:
            self._id_to_symbol[attribute_id] = list(symbols)
            self._symbol_to_id[attribute_id] = {s: i for i, s in enumerate(symbols)}


@dataclass
class IngestStats:
    """Counters for rows that could not become records."""

    rows: int = 0
    records: int = 0
    skipped_malformed: int = 0
    skipped_too_few_units: int = 0
    skipped_bad_coordinate: int = 0

    @property
    def skipped(self) -> int:
        return self.skipped_malformed + self.skipped_too_few_units + self.skipped_bad_coordinate


def tokenize_text(text: str) -> list[str]:
    """Lowercase, split on non-alphanumerics, drop tokens shorter than 2."""
    return [tok for tok in _TOKEN_SPLIT.split(text.lower()) if len(tok) >= 2]


def discretize_location(
    lat: float,
    lon: float,
    origin: tuple[float, float],
    cell_meters: float,
) -> str:
    """Map a coordinate to its "gx_gy" grid-cell symbol.

    Uses an equirectangular local projection about ``origin``: meters
    east = dlon * cos(lat0) * 111320, meters north = dlat * 111320.
    """
    if cell_meters <= 0:
        raise ValueError("cell_meters must be positive")
    if not (math.isfinite(lat) and math.isfinite(lon)):
        raise InvalidCoordinateError(f"non-finite coordinate ({lat}, {lon})")
    if abs(lat) > 90.0 or abs(lon) > 180.0:
        raise InvalidCoordinateError(f"coordinate out of range ({lat}, {lon})")
    lat0, lon0 = origin
    east = (lon - lon0) * math.cos(math.radians(lat0)) * METERS_PER_DEGREE
    north = (lat - lat0) * METERS_PER_DEGREE
    gx = math.floor(east / cell_meters)
    gy = math.floor(north / cell_meters)
    return f"{gx}_{gy}"


def discretize_timestamp(ts: float, granularity: float) -> str:
    """Map an epoch timestamp to its bin symbol floor(ts / granularity)."""
    if granularity <= 0:
        raise ValueError("granularity must be positive")
    return str(math.floor(ts / granularity))


def parse_timestamp(value: str) -> float:
    """Parse an ISO-8601 or numeric epoch-seconds timestamp (UTC only)."""
    text = value.strip()
    try:
        return float(text)
    except ValueError:
        pass
    dt = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt.timestamp()


class StreamSchema:
    """Bound schema for one CSV stream: column resolution plus row parsing."""

    def __init__(
        self,
        attributes: Sequence[AttributeSchema],
        timestamp_column: str,
    ) -> None:
        ids = [a.attribute_id for a in attributes]
        if sorted(ids) != list(range(len(attributes))):
            raise ConfigError("attribute_ids must be contiguous from 0 and unique")
        self.attributes = sorted(attributes, key=lambda a: a.attribute_id)
        self.timestamp_column = timestamp_column
        self._columns: dict[str, int] | None = None

    @property
    def n_attributes(self) -> int:
        return len(self.attributes)

    def bind_header(self, header: Sequence[str]) -> None:
        """Resolve declared column names against the file header.

        A declared column missing from the header is a configuration
        error and fatal at startup.
        """
        positions = {name: i for i, name in enumerate(header)}
        needed = [self.timestamp_column]
        for attr in self.attributes:
            if attr.kind == KIND_LOCATION:
                needed.extend([attr.lat_column, attr.lon_column])
            else:
                needed.append(attr.column)
        for name in needed:
            if name not in positions:
                raise ConfigError(f"declared column {name!r} not present in stream header")
        self._columns = positions

    def parse_row(
        self,
        row: Sequence[str],
        registry: VocabRegistry,
        stats: IngestStats,
    ) -> Record | None:
        """Turn one CSV row into a Record, or count and skip it.

        Malformed rows and rows yielding fewer than two units are never
        fatal: they increment the matching counter and return None.
        """
        if self._columns is None:
            raise ConfigError("schema header not bound; call bind_header first")
        stats.rows += 1
        columns = self._columns

        def cell(name: str) -> str:
            index = columns[name]
            if index >= len(row):
                raise IndexError(name)
            return row[index]

        try:
            ts = parse_timestamp(cell(self.timestamp_column))
        except (ValueError, IndexError):
            stats.skipped_malformed += 1
            return None

        units: list[Unit] = []
        seen: set[Unit] = set()

        def add(attribute_id: int, symbol: str) -> None:
            unit = Unit(attribute_id, registry.intern(attribute_id, symbol))
            if unit not in seen:
                seen.add(unit)
                units.append(unit)

        for attr in self.attributes:
            try:
                if attr.kind == KIND_CATEGORICAL:
                    value = cell(attr.column).strip()
                    if value:
                        add(attr.attribute_id, value)
                elif attr.kind == KIND_SET:
                    for part in cell(attr.column).split(";"):
                        part = part.strip()
                        if part:
                            add(attr.attribute_id, part)
                elif attr.kind == KIND_TEXT:
                    for token in tokenize_text(cell(attr.column)):
                        add(attr.attribute_id, token)
                elif attr.kind == KIND_LOCATION:
                    lat_text = cell(attr.lat_column).strip()
                    lon_text = cell(attr.lon_column).strip()
                    if lat_text and lon_text:
                        symbol = discretize_location(
                            float(lat_text), float(lon_text), attr.origin, attr.cell_meters
                        )
                        add(attr.attribute_id, symbol)
                elif attr.kind == KIND_TIMEBIN:
                    add(attr.attribute_id, discretize_timestamp(ts, attr.granularity))
            except InvalidCoordinateError:
                stats.skipped_bad_coordinate += 1
                return None
            except (ValueError, IndexError):
                stats.skipped_malformed += 1
                return None

        if len(units) < 2:
            # A record with fewer than two units cannot form a recovery task.
            stats.skipped_too_few_units += 1
            return None
        stats.records += 1
        return Record(timestamp=ts, units=tuple(units))


def read_records(
    path: str,
    schema: StreamSchema,
    registry: VocabRegistry,
    stats: IngestStats | None = None,
) -> Iterator[Record]:
    """Stream records from a headered CSV file, interning lazily."""
    if stats is None:
        stats = IngestStats()
    with open(path, "r", encoding="utf-8", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            return
        schema.bind_header(header)
        for row in reader:
            record = schema.parse_row(row, registry, stats)
            if record is not None:
                yield record


@dataclass
class WindowingStats:
    """Counters for the window segmentation pass."""

    assigned: int = 0
    late_records: int = 0


def segment_windows(
    records: Iterable[Record],
    window_seconds: float,
    stats: WindowingStats | None = None,
) -> Iterator[UpdatingWindow]:
    """Partition a chronological record stream into fixed-width windows.

    Spans are half-open [start, start + width) and aligned to multiples
    of ``window_seconds``, so window ids line up with wall-clock slots.
    Empty intermediate windows are emitted; out-of-order records are
    counted as late and dropped.
    """
    if window_seconds <= 0:
        raise ValueError("window_seconds must be positive")
    if stats is None:
        stats = WindowingStats()

    base: float | None = None
    current: UpdatingWindow | None = None
    max_ts: float | None = None

    for record in records:
        if max_ts is not None and record.timestamp < max_ts:
            stats.late_records += 1
            continue
        max_ts = record.timestamp
        if base is None:
            base = math.floor(record.timestamp / window_seconds) * window_seconds
            current = UpdatingWindow(0, base, window_seconds)
        index = int(math.floor((record.timestamp - base) / window_seconds))
        assert current is not None
        while current.window_id < index:
            yield current
            next_id = current.window_id + 1
            current = UpdatingWindow(next_id, base + next_id * window_seconds, window_seconds)
        current.records.append(record)
        stats.assigned += 1

    if current is not None:
        yield current


def window_novelty_stats(
    windows: Sequence[UpdatingWindow],
    attribute_id: int,
    n_attributes: int | None = None,
) -> list[tuple[int, float]]:
    """Per-window fraction of distinct units new-or-repeating vs cumulative.

    For each window with at least one unit of the attribute, reports
    (distinct units in the window) / (distinct units seen up to and
    including the window). The first non-empty window is exactly 1.0.
    """
    if n_attributes is not None and not (0 <= attribute_id < n_attributes):
        raise ConfigError(f"attribute_id {attribute_id} not in schema")
    cumulative: set[int] = set()
    rows: list[tuple[int, float]] = []
    for window in windows:
        in_window = {
            unit.unit_id
            for record in window.records
            for unit in record.units
            if unit.attribute_id == attribute_id
        }
        if not in_window:
            continue
        cumulative |= in_window
        rows.append((window.window_id, len(in_window) / len(cumulative)))
    return rows
