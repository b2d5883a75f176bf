"""Planted synthetic record streams for tests and benchmarks.

Generative process: units of each attribute are partitioned into G
group pools (optionally size-skewed). Each record samples one group,
then per attribute one unit from that group's pool, replaced with a
uniform random unit of the attribute with noise probability rho.
Timestamps are a Poisson arrival process.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .seeding import TAG_SYNTH, make_rng


@dataclass
class SynthConfig:
    attributes: int = 2
    groups: int = 8
    units_per_attr: int = 200
    rho: float = 0.1
    records: int = 50000
    mean_gap_seconds: float = 1.0
    skew: float = 0.0
    start_ts: float = 0.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.attributes < 2:
            raise ValueError("need at least two attributes")
        if not (1 <= self.groups <= self.units_per_attr):
            raise ValueError("groups must be in [1, units_per_attr]")
        if not (0.0 <= self.rho <= 1.0):
            raise ValueError("rho must be in [0, 1]")
        if self.records < 1:
            raise ValueError("records must be >= 1")
        if self.mean_gap_seconds <= 0:
            raise ValueError("mean_gap_seconds must be positive")
        if self.skew < 0:
            raise ValueError("skew must be non-negative")


def group_sizes(cfg: SynthConfig) -> list[int]:
    """Partition units_per_attr into group pool sizes, skewed by rank."""
    weights = np.array([(g + 1.0) ** -cfg.skew for g in range(cfg.groups)])
    weights /= weights.sum()
    sizes = np.maximum(1, np.floor(weights * cfg.units_per_attr).astype(int))
    # Distribute the remainder to the largest groups first.
    while sizes.sum() < cfg.units_per_attr:
        sizes[int(np.argmin(sizes / weights))] += 1
    while sizes.sum() > cfg.units_per_attr:
        candidates = np.flatnonzero(sizes > 1)
        sizes[candidates[int(np.argmax(sizes[candidates] / weights[candidates]))]] -= 1
    return [int(s) for s in sizes]


def unit_symbol(attribute_id: int, unit_index: int) -> str:
    return f"a{attribute_id}_u{unit_index}"


@dataclass
class SynthStream:
    config: SynthConfig
    rows: list[tuple[float, list[str]]]
    group_of_unit: list[int]  # unit index -> planted group (same per attribute)
    sizes: list[int]


def generate(cfg: SynthConfig) -> SynthStream:
    """Materialize the stream rows plus the planted group assignment."""
    rng = make_rng(cfg.seed, TAG_SYNTH)
    sizes = group_sizes(cfg)
    offsets = np.cumsum([0] + sizes[:-1])
    group_of_unit = [0] * cfg.units_per_attr
    for g, (off, size) in enumerate(zip(offsets, sizes)):
        for u in range(off, off + size):
            group_of_unit[u] = g
    popularity = np.array(sizes, dtype=np.float64)
    popularity /= popularity.sum()

    rows: list[tuple[float, list[str]]] = []
    ts = cfg.start_ts
    for _ in range(cfg.records):
        ts += float(rng.exponential(cfg.mean_gap_seconds))
        group = int(rng.choice(cfg.groups, p=popularity))
        symbols = []
        for aid in range(cfg.attributes):
            if cfg.rho > 0.0 and rng.random() < cfg.rho:
                unit = int(rng.integers(0, cfg.units_per_attr))
            else:
                unit = int(offsets[group] + rng.integers(0, sizes[group]))
            symbols.append(unit_symbol(aid, unit))
        rows.append((ts, symbols))
    return SynthStream(cfg, rows, group_of_unit, sizes)


def write_stream(stream: SynthStream, out_dir: str | Path) -> dict[str, str]:
    """Write stream.csv, per-attribute category files, and synth_meta.json.

    The category files map each unit symbol to its planted group, in the
    explicit-cluster mapping format (unit_symbol,category_symbol).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = stream.config

    stream_path = out / "stream.csv"
    with stream_path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["ts"] + [f"attr_{aid}" for aid in range(cfg.attributes)])
        for ts, symbols in stream.rows:
            writer.writerow([f"{ts:.6f}"] + symbols)

    paths = {"stream": str(stream_path)}
    for aid in range(cfg.attributes):
        cat_path = out / f"categories_attr_{aid}.csv"
        with cat_path.open("w", encoding="utf-8", newline="") as handle:
            writer = csv.writer(handle)
            for unit_index, group in enumerate(stream.group_of_unit):
                writer.writerow([unit_symbol(aid, unit_index), f"group_{group}"])
        paths[f"categories_attr_{aid}"] = str(cat_path)

    meta_path = out / "synth_meta.json"
    meta = {"config": asdict(cfg), "group_sizes": stream.sizes, "paths": paths}
    meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    paths["meta"] = str(meta_path)
    return paths
