"""Problem instances: generation, validation and the JSON file format."""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ParseError, ValidationError
from .fileio import atomic_write_text
from .rng import SplitMix64

FORMAT_VERSION = 1
DEPOT_END_TIME = 10_000.0


@dataclass(frozen=True)
class GenerationConfig:
    fleet_size: int = 5
    capacity_raw: float = 40.0
    min_raw_demand: int = 1
    max_raw_demand: int = 10
    min_end_time: float = 50.0
    max_end_time: float = 10_000.0
    depot_end_time: float = DEPOT_END_TIME
    speed: float = 0.014

    def validate(self) -> None:
        if self.fleet_size < 1:
            raise ConfigurationError(f"fleet_size must be >= 1, got {self.fleet_size}")
        if not self.capacity_raw > 0:
            raise ConfigurationError(f"capacity_raw must be positive, got {self.capacity_raw}")
        if not self.speed > 0:
            raise ConfigurationError(f"speed must be positive, got {self.speed}")
        if not 1 <= self.min_raw_demand <= self.max_raw_demand:
            raise ConfigurationError(
                f"need 1 <= min_raw_demand <= max_raw_demand, got "
                f"{self.min_raw_demand}, {self.max_raw_demand}")
        if self.max_raw_demand > self.capacity_raw:
            raise ConfigurationError("max_raw_demand exceeds vehicle capacity")
        if not 0 < self.min_end_time <= self.max_end_time:
            raise ConfigurationError(
                f"need 0 < min_end_time <= max_end_time, got "
                f"{self.min_end_time}, {self.max_end_time}")
        if not self.depot_end_time > 0:
            raise ConfigurationError("depot_end_time must be positive")


def _frozen(a, dtype=np.float64) -> np.ndarray:
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Instance:
    """Static problem definition. Node 0 is the depot.

    ``demand`` holds fractions of vehicle capacity, ``end_times`` seconds,
    coordinates normalized distance units.
    """

    coords: np.ndarray
    demand: np.ndarray
    end_times: np.ndarray
    fleet_size: int = 5
    capacity_raw: float = 40.0
    speed: float = 0.014
    seed: Optional[int] = None
    _dist: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "coords", _frozen(self.coords).reshape(-1, 2))
        object.__setattr__(self, "demand", _frozen(self.demand))
        object.__setattr__(self, "end_times", _frozen(self.end_times))
        diff = self.coords[:, None, :] - self.coords[None, :, :]
        object.__setattr__(self, "_dist", _frozen(np.sqrt((diff ** 2).sum(-1))))

    @property
    def num_nodes(self) -> int:
        return len(self.coords)

    @property
    def num_customers(self) -> int:
        return len(self.coords) - 1

    @property
    def distance_matrix(self) -> np.ndarray:
        return self._dist

    @property
    def demand_raw(self) -> np.ndarray:
        return self.demand * self.capacity_raw

    def distance(self, i: int, j: int) -> float:
        n = self.num_nodes
        if not (0 <= i < n and 0 <= j < n):
            raise IndexError(f"node index out of range: ({i}, {j}) with N={n}")
        (x1, y1), (x2, y2) = self.coords[i], self.coords[j]
        return math.hypot(x1 - x2, y1 - y2)

    def validate(self) -> "Instance":
        n = self.num_nodes
        if n < 2:
            raise ValidationError(f"instance needs a depot and at least one customer, got N={n}")
        if self.demand.shape != (n,) or self.end_times.shape != (n,):
            raise ValidationError("coords, demand and end_times must have the same node count")
        if self.fleet_size < 1:
            raise ValidationError(f"fleet_size must be >= 1, got {self.fleet_size}")
        if not self.speed > 0 or not self.capacity_raw > 0:
            raise ValidationError("speed and capacity_raw must be positive")
        bad = np.argwhere((self.coords < 0) | (self.coords > 1) | ~np.isfinite(self.coords))
        if len(bad):
            i, k = bad[0]
            raise ValidationError(f"node {i}: coordinate {'xy'[k]}={self.coords[i, k]} outside [0, 1]")
        if self.demand[0] != 0:
            raise ValidationError(f"depot demand must be 0, got {self.demand[0]}")
        cust = self.demand[1:]
        bad = np.flatnonzero(~((cust > 0) & (cust <= 1)))
        if len(bad):
            i = bad[0] + 1
            raise ValidationError(f"node {i}: demand {self.demand[i]} outside (0, capacity]")
        bad = np.flatnonzero(~((self.end_times[1:] > 0) & np.isfinite(self.end_times[1:])))
        if len(bad):
            i = bad[0] + 1
            raise ValidationError(f"node {i}: end_time {self.end_times[i]} must be positive")
        if not self.end_times[0] > 0:
            raise ValidationError("depot end_time must be positive")
        return self

    def __eq__(self, other):
        if not isinstance(other, Instance):
            return NotImplemented
        return (self.fleet_size == other.fleet_size
                and self.capacity_raw == other.capacity_raw
                and self.speed == other.speed
                and self.seed == other.seed
                and np.array_equal(self.coords, other.coords)
                and np.array_equal(self.demand, other.demand)
                and np.array_equal(self.end_times, other.end_times))

    __hash__ = None


def generate_instance(num_customers: int, seed: int,
                      config: GenerationConfig = GenerationConfig()) -> Instance:
    """Draw a random instance: coordinates, then demands, then end-times.

    All draws come from one SplitMix64 stream seeded with ``seed``, in that
    order (x, y per node including the depot; one raw demand per customer;
    one end-time per customer).
    """
    config.validate()
    if num_customers < 1:
        raise ConfigurationError(f"num_customers must be >= 1, got {num_customers}")
    rng = SplitMix64(seed)
    n = num_customers + 1
    coords = [(rng.random(), rng.random()) for _ in range(n)]
    raw = [0] + [rng.randint(config.min_raw_demand, config.max_raw_demand)
                 for _ in range(num_customers)]
    ends = [config.depot_end_time] + [rng.uniform(config.min_end_time, config.max_end_time)
                                      for _ in range(num_customers)]
    demand = np.asarray(raw, dtype=np.float64) / config.capacity_raw
    if num_customers >= 40 and config.fleet_size >= demand.sum():
        warnings.warn(
            f"fleet capacity ({config.fleet_size}) covers total demand "
            f"({demand.sum():.3f}); the instance is not capacity-bound", stacklevel=2)
    return Instance(coords=coords, demand=demand, end_times=ends,
                    fleet_size=config.fleet_size, capacity_raw=config.capacity_raw,
                    speed=config.speed, seed=seed)


def _raw_value(x: float):
    r = round(x)
    return int(r) if abs(x - r) < 1e-9 else float(x)


def instance_to_dict(instance: Instance) -> dict:
    return {
        "version": FORMAT_VERSION,
        "seed": instance.seed,
        "speed": instance.speed,
        "capacity_raw": _raw_value(instance.capacity_raw),
        "fleet_size": instance.fleet_size,
        "nodes": [
            {"x": float(x), "y": float(y),
             "demand_raw": _raw_value(d * instance.capacity_raw),
             "end_time": float(e)}
            for (x, y), d, e in zip(instance.coords, instance.demand, instance.end_times)
        ],
    }


def _field(obj, key, where, kind=(int, float)):
    if not isinstance(obj, dict) or key not in obj:
        raise ParseError(f"{where}: missing field '{key}'")
    val = obj[key]
    if isinstance(val, bool) or not isinstance(val, kind):
        raise ParseError(f"{where}.{key}: expected number, got {val!r}")
    return val


def instance_from_dict(data: dict) -> Instance:
    if not isinstance(data, dict):
        raise ParseError("instance file: top level must be an object")
    version = _field(data, "version", "instance", int)
    if version != FORMAT_VERSION:
        raise ParseError(f"instance.version: unsupported version {version}")
    seed = data.get("seed")
    if seed is not None and (isinstance(seed, bool) or not isinstance(seed, int)):
        raise ParseError(f"instance.seed: expected integer or null, got {seed!r}")
    speed = float(_field(data, "speed", "instance"))
    cap = _field(data, "capacity_raw", "instance")
    fleet = _field(data, "fleet_size", "instance", int)
    nodes = data.get("nodes")
    if not isinstance(nodes, list):
        raise ParseError("instance: missing or non-list field 'nodes'")
    coords, raw, ends = [], [], []
    for i, node in enumerate(nodes):
        where = f"nodes[{i}]"
        coords.append((_field(node, "x", where), _field(node, "y", where)))
        raw.append(_field(node, "demand_raw", where))
        ends.append(_field(node, "end_time", where))
    if cap <= 0:
        raise ValidationError(f"capacity_raw must be positive, got {cap}")
    inst = Instance(coords=np.asarray(coords, dtype=np.float64).reshape(-1, 2),
                    demand=np.asarray(raw, dtype=np.float64) / cap,
                    end_times=ends, fleet_size=fleet, capacity_raw=cap, speed=speed, seed=seed)
    return inst.validate()


def save_instance(instance: Instance, path) -> None:
    atomic_write_text(path, json.dumps(instance_to_dict(instance), indent=1) + "\n")


def load_instance(path) -> Instance:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    try:
        return instance_from_dict(data)
    except (ParseError, ValidationError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc
