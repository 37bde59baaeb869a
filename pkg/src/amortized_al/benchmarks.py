"""Evaluation problems on the unit cube: four synthetic functions and two pools."""

from __future__ import annotations

import csv
import functools
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

NOISE_STD = 0.1
NORMALIZATION_SEED = 20240
NORMALIZATION_SAMPLES = 10_000
DATA_ENV = "AMORTIZED_AL_DATA"
PROBLEM_NAMES = ("sin", "branin", "simionescu", "townsend", "airline", "lgbb")
BRANIN_VARIANTS = ("standard", "printed")


class DataFormatError(ValueError):
    pass


# -- raw functions on native coordinates --------------------------------------

_BRANIN = dict(a=1.0, b=5.1 / (4 * math.pi**2), c=5 / math.pi, r=6.0, s=10.0, t=1 / (8 * math.pi))


def branin_native(x1, x2, variant: str = "standard"):
    p = _BRANIN
    inner = x2 - p["b"] * x1**2 + p["c"] * x1 - p["r"]
    if variant == "standard":
        inner = inner**2
    elif variant != "printed":
        raise ValueError(f"unknown Branin variant {variant!r}; use one of {BRANIN_VARIANTS}")
    return p["a"] * inner + p["s"] * (1 - p["t"]) * np.cos(x1) + p["s"]


def simionescu_native(x1, x2):
    return 0.1 * x1 * x2


def townsend_native(x1, x2):
    return -np.cos((x1 - 0.1) * x2) ** 2 - x1 * np.sin(3 * x1 + x2)


@dataclass(frozen=True)
class BenchmarkSpec:
    name: str
    dim: int
    lower: tuple
    upper: tuple
    raw: Callable = field(repr=False)
    noise_std: float = NOISE_STD
    normalize: bool = True
    norm_seed: int = NORMALIZATION_SEED
    norm_samples: int = NORMALIZATION_SAMPLES

    def to_native(self, x):
        x = np.asarray(x, dtype=float)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return lo + (hi - lo) * x

    def to_unit(self, z):
        z = np.asarray(z, dtype=float)
        lo, hi = np.asarray(self.lower), np.asarray(self.upper)
        return (z - lo) / (hi - lo)

    def raw_unit(self, x):
        z = self.to_native(x)
        return self.raw(*np.moveaxis(z, -1, 0))

    @functools.cached_property
    def normalization(self) -> tuple[float, float]:
        """(mean, std) of noise-free values on a fixed uniform sample."""
        if not self.normalize:
            return 0.0, 1.0
        rng = np.random.default_rng(self.norm_seed)
        vals = self.raw_unit(rng.uniform(size=(self.norm_samples, self.dim)))
        return float(vals.mean()), float(vals.std())

    def __call__(self, x):
        m, s = self.normalization
        return (self.raw_unit(x) - m) / s


def _spec_sin():
    return BenchmarkSpec("sin", 1, (0.0,), (1.0,), lambda x: np.sin(20 * x), normalize=False)


def _spec_branin(variant: str = "standard"):
    if variant not in BRANIN_VARIANTS:
        raise ValueError(f"unknown Branin variant {variant!r}; use one of {BRANIN_VARIANTS}")
    return BenchmarkSpec(
        "branin", 2, (-5.0, 0.0), (10.0, 15.0),
        functools.partial(branin_native, variant=variant),
    )


SPECS: dict[str, Callable[..., BenchmarkSpec]] = {
    "sin": _spec_sin,
    "branin": _spec_branin,
    "simionescu": lambda: BenchmarkSpec("simionescu", 2, (-1.25, -1.25), (1.25, 1.25), simionescu_native),
    "townsend": lambda: BenchmarkSpec("townsend", 2, (-2.25, -2.5), (2.25, 1.75), townsend_native),
}


@functools.lru_cache(maxsize=None)
def get_spec(name: str, variant: str = "standard") -> BenchmarkSpec:
    if name == "branin":
        return _spec_branin(variant)
    return SPECS[name]()


def eval_sin(x):
    return np.sin(20 * np.asarray(x, dtype=float))


def eval_branin(x, variant: str = "standard", normalize: bool = True):
    spec = get_spec("branin", variant)
    return spec(x) if normalize else spec.raw_unit(x)


def eval_simionescu(x, normalize: bool = True):
    spec = get_spec("simionescu")
    return spec(x) if normalize else spec.raw_unit(x)


def eval_townsend(x, normalize: bool = True):
    spec = get_spec("townsend")
    return spec(x) if normalize else spec.raw_unit(x)


# -- problems -----------------------------------------------------------------


@dataclass
class Problem:
    """An active-learning target on ``[0, 1]^D``.

    Continuous problems label any point with the normalized function plus
    Gaussian noise; pool problems expose fixed candidates whose recorded
    labels are revealed on query.
    """

    name: str
    dim: int
    mode: str
    function: Optional[Callable] = None
    noise_std: float = 0.0
    pool_X: Optional[np.ndarray] = None
    pool_Y: Optional[np.ndarray] = None
    native: Optional[Callable] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in ("continuous", "pool"):
            raise ValueError(f"mode must be 'continuous' or 'pool', got {self.mode!r}")
        if self.mode == "pool":
            self.pool_X = np.array(self.pool_X, dtype=float)
            self.pool_Y = np.array(self.pool_Y, dtype=float)
            self.pool_X.setflags(write=False)
            self.pool_Y.setflags(write=False)

    @property
    def is_pool(self) -> bool:
        return self.mode == "pool"

    @property
    def pool_size(self) -> int:
        return len(self.pool_X) if self.is_pool else 0

    def to_native(self, x):
        x = np.asarray(x, dtype=float)
        return self.native(x) if self.native is not None else x

    def noise_free(self, x):
        return np.asarray(self.function(np.asarray(x, dtype=float)), dtype=float)

    def label(self, x, rng: np.random.Generator):
        """Noisy label(s) at unit-cube input(s) ``x``; one noise draw per point."""
        f = self.noise_free(x)
        return f + self.noise_std * rng.standard_normal(np.shape(f))


def synthetic_problem(name: str, variant: str = "standard") -> Problem:
    spec = get_spec(name, variant)
    info = {"variant": variant} if name == "branin" else {}
    if spec.normalize:
        info["norm_mean"], info["norm_std"] = spec.normalization
        info["norm_seed"] = spec.norm_seed
        info["norm_samples"] = spec.norm_samples
    return Problem(name, spec.dim, "continuous", spec, spec.noise_std, native=spec.to_native, info=info)


def _standardize(y: np.ndarray) -> tuple[np.ndarray, float, float]:
    m = y.mean()
    s = y.std()
    return (y - m) / s, float(m), float(s)


_MONTH = re.compile(r"^\s*(\d{4})-(\d{1,2})\s*$")


def ingest_airline(path) -> Problem:
    """Monthly passenger counts -> 1-D pool with dates scaled onto ``[0, 1]``."""
    times, counts = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, start=1):
            if not row or not "".join(row).strip():
                continue
            if lineno == 1 and not _MONTH.match(row[0]):
                continue  # header
            m = _MONTH.match(row[0]) if len(row) >= 2 else None
            if m is None:
                raise DataFormatError(f"{path}:{lineno}: expected 'YYYY-MM,count', got {row!r}")
            year, month = int(m.group(1)), int(m.group(2))
            if not 1 <= month <= 12:
                raise DataFormatError(f"{path}:{lineno}: month {month} out of range")
            try:
                counts.append(float(row[1]))
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: passenger count {row[1]!r} is not a number") from None
            times.append(year + (month - 1) / 12)
    if len(times) < 2:
        raise DataFormatError(f"{path}: need at least two rows")
    t = np.array(times)
    t0, t1 = t.min(), t.max()
    X = ((t - t0) / (t1 - t0))[:, None]
    Y, m, s = _standardize(np.array(counts))
    return Problem(
        "airline", 1, "pool", pool_X=X, pool_Y=Y,
        native=lambda x, t0=t0, t1=t1: t0 + (t1 - t0) * np.asarray(x),
        info={"source": str(path), "y_mean": m, "y_std": s},
    )


def ingest_lgbb(path) -> Problem:
    """LGBB table (whitespace or comma separated, with a header) -> 2-D lift pool."""
    with open(path) as fh:
        lines = [ln for ln in fh.read().splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines:
        raise DataFormatError(f"{path}: empty file")
    split = (lambda s: [c.strip() for c in s.split(",")]) if "," in lines[0] else str.split
    header = [h.strip('"').lower() for h in split(lines[0])]
    missing = [c for c in ("mach", "alpha", "lift") if c not in header]
    if missing:
        raise DataFormatError(f"{path}: missing column(s) {', '.join(missing)}; found {header}")
    im, ia, il = (header.index(c) for c in ("mach", "alpha", "lift"))
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        parts = split(line)
        try:
            rows.append((float(parts[im]), float(parts[ia]), float(parts[il])))
        except (ValueError, IndexError):
            raise DataFormatError(f"{path}:{lineno}: malformed row {line!r}") from None
    data = np.array(rows)
    X = np.stack([data[:, 0] / 6.0, (data[:, 1] + 5.0) / 35.0], axis=1)
    Y, m, s = _standardize(data[:, 2])
    return Problem(
        "lgbb", 2, "pool", pool_X=X, pool_Y=Y,
        native=lambda x: np.stack([6.0 * np.asarray(x)[..., 0], 35.0 * np.asarray(x)[..., 1] - 5.0], axis=-1),
        info={"source": str(path), "y_mean": m, "y_std": s},
    )


DATA_FILES = {"airline": "airline-passengers.csv", "lgbb": "lgbb_original.txt"}


def get_problem(name: str, data_dir=None, variant: str = "standard", path=None) -> Problem:
    """Problem by CLI name. Pools are read from ``path`` or ``data_dir``
    (default: ``$AMORTIZED_AL_DATA``)."""
    if name in SPECS:
        return synthetic_problem(name, variant)
    if name not in DATA_FILES:
        raise ValueError(f"unknown problem {name!r}; choose from {', '.join(PROBLEM_NAMES)}")
    if path is None:
        data_dir = data_dir or os.environ.get(DATA_ENV)
        if not data_dir:
            raise FileNotFoundError(
                f"problem {name!r} needs its data file; pass a path or set ${DATA_ENV}"
            )
        path = Path(data_dir) / DATA_FILES[name]
    return ingest_airline(path) if name == "airline" else ingest_lgbb(path)
