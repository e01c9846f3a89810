"""Synthetic two-class grid samples and CSV-backed gridded datasets.

Samples are 2-D real fields with a validity mask (invalid cells model
land points in geophysical grids). The synthetic task places one square
patch on the right half (identical for both classes) and one on the left
half whose sign (+1 / -1) defines the class, plus uniform noise and a
vertical barrier of invalid columns broken by a small gateway.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .kvformat import read_kv, write_kv


class ConfigError(ValueError):
    """Invalid generator configuration; message names the offending field."""


class GridLoadError(Exception):
    """Base class for CSV grid loading failures."""


class DimensionMismatch(GridLoadError):
    """Grid/mask/target dimensions are inconsistent."""


class NumberParseError(GridLoadError):
    """A CSV field could not be parsed as a number."""


@dataclass(frozen=True)
class RegionSpec:
    """Rectangle of grid cells, inclusive on both ends."""

    row0: int
    row1: int
    col0: int
    col1: int

    def __post_init__(self):
        if self.row1 < self.row0 or self.col1 < self.col0:
            raise ConfigError(f"region {self} is empty")

    @property
    def height(self) -> int:
        return self.row1 - self.row0 + 1

    @property
    def width(self) -> int:
        return self.col1 - self.col0 + 1

    @property
    def n_cells(self) -> int:
        return self.height * self.width

    @property
    def rows(self) -> slice:
        return slice(self.row0, self.row1 + 1)

    @property
    def cols(self) -> slice:
        return slice(self.col0, self.col1 + 1)

    def within(self, height: int, width: int) -> bool:
        return 0 <= self.row0 and self.row1 < height and 0 <= self.col0 and self.col1 < width

    def overlaps(self, other: "RegionSpec") -> bool:
        return not (
            self.row1 < other.row0
            or other.row1 < self.row0
            or self.col1 < other.col0
            or other.col1 < self.col0
        )

    def contains(self, other: "RegionSpec") -> bool:
        return (
            self.row0 <= other.row0
            and other.row1 <= self.row1
            and self.col0 <= other.col0
            and other.col1 <= self.col1
        )

    def to_string(self) -> str:
        return f"{self.row0}:{self.row1},{self.col0}:{self.col1}"

    @classmethod
    def from_string(cls, text: str) -> "RegionSpec":
        try:
            rows, cols = text.split(",")
            r0, r1 = (int(v) for v in rows.split(":"))
            c0, c1 = (int(v) for v in cols.split(":"))
        except ValueError as exc:
            raise ConfigError(f"bad region string {text!r}, expected 'r0:r1,c0:c1'") from exc
        return cls(r0, r1, c0, c1)


@dataclass
class GridSample:
    """One 2-D field with validity mask, continuous target, and class label."""

    values: np.ndarray  # (H, W) float64
    mask: np.ndarray  # (H, W) bool, True = valid cell
    target: float
    label: int  # 1 or 2

    def __post_init__(self):
        if self.values.shape != self.mask.shape:
            raise DimensionMismatch(
                f"values {self.values.shape} and mask {self.mask.shape} differ"
            )

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


@dataclass
class GridDataset:
    """Ordered samples sharing one geometry and one validity mask."""

    samples: list
    split: str  # 'train' or 'validation'

    def __post_init__(self):
        if self.samples:
            first = self.samples[0]
            for s in self.samples[1:]:
                if s.values.shape != first.values.shape:
                    raise DimensionMismatch("samples disagree on grid shape")
                if not np.array_equal(s.mask, first.mask):
                    raise DimensionMismatch("samples disagree on validity mask")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, idx):
        return self.samples[idx]

    @property
    def mask(self) -> np.ndarray:
        return self.samples[0].mask

    @property
    def height(self) -> int:
        return self.samples[0].height

    @property
    def width(self) -> int:
        return self.samples[0].width

    def targets(self) -> np.ndarray:
        return np.array([s.target for s in self.samples], dtype=np.float64)

    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    def with_label(self, label: int) -> list:
        return [s for s in self.samples if s.label == label]


@dataclass
class SyntheticConfig:
    """Geometry and sampling parameters of the synthetic two-class task.

    Default geometry: 100x100 grid, 20x20 squares vertically centered
    (rows 40..59), left square around column 25, right square around
    column 75, a 5-column barrier of invalid cells (columns 48..52) with
    a 20x5 gateway aligned with the squares. That leaves exactly 9,600
    valid cells.
    """

    height: int = 100
    width: int = 100
    left_square: RegionSpec = field(default_factory=lambda: RegionSpec(40, 59, 15, 34))
    right_square: RegionSpec = field(default_factory=lambda: RegionSpec(40, 59, 65, 84))
    square_magnitude: float = 1.0
    noise_low: float = -0.5
    noise_high: float = 0.5
    barrier_columns: tuple = (48, 52)
    gateway: RegionSpec = field(default_factory=lambda: RegionSpec(40, 59, 48, 52))
    n_train_per_class: int = 200
    n_val_per_class: int = 50
    seed: int = 42

    @property
    def barrier_region(self) -> RegionSpec:
        c0, c1 = self.barrier_columns
        return RegionSpec(0, self.height - 1, c0, c1)

    @property
    def n_valid(self) -> int:
        """Closed-form valid-cell count: H*W - barrier + gateway."""
        return self.height * self.width - self.barrier_region.n_cells + self.gateway.n_cells

    def validate(self) -> None:
        if self.height < 1 or self.width < 1:
            raise ConfigError("height/width must be positive")
        # Degenerate noise_low == noise_high (constant, usually 0) is allowed
        # for noise-free runs.
        if self.noise_low > self.noise_high:
            raise ConfigError("noise_low must not exceed noise_high")
        for name in ("left_square", "right_square", "gateway"):
            region = getattr(self, name)
            if not region.within(self.height, self.width):
                raise ConfigError(f"{name} {region.to_string()} exceeds grid bounds")
        barrier = self.barrier_region
        if not barrier.within(self.height, self.width):
            raise ConfigError(f"barrier_columns {self.barrier_columns} exceed grid bounds")
        if self.left_square.overlaps(self.right_square):
            raise ConfigError("left_square overlaps right_square")
        for name in ("left_square", "right_square"):
            if getattr(self, name).overlaps(barrier):
                raise ConfigError(f"{name} overlaps the barrier columns")
        if not barrier.contains(self.gateway):
            raise ConfigError("gateway must lie inside the barrier footprint")
        if self.n_train_per_class < 1:
            raise ConfigError("n_train_per_class must be >= 1")
        if self.n_val_per_class < 0:
            raise ConfigError("n_val_per_class must be >= 0")

    def to_kv(self) -> dict:
        return {
            "data.height": self.height,
            "data.width": self.width,
            "data.left_square": self.left_square.to_string(),
            "data.right_square": self.right_square.to_string(),
            "data.square_magnitude": self.square_magnitude,
            "data.noise_low": self.noise_low,
            "data.noise_high": self.noise_high,
            "data.barrier_columns": f"{self.barrier_columns[0]}:{self.barrier_columns[1]}",
            "data.gateway": self.gateway.to_string(),
            "data.n_train_per_class": self.n_train_per_class,
            "data.n_val_per_class": self.n_val_per_class,
            "data.seed": self.seed,
        }

    @classmethod
    def from_kv(cls, kv: dict) -> "SyntheticConfig":
        c0, c1 = (int(v) for v in str(kv["data.barrier_columns"]).split(":"))
        return cls(
            height=int(kv["data.height"]),
            width=int(kv["data.width"]),
            left_square=RegionSpec.from_string(kv["data.left_square"]),
            right_square=RegionSpec.from_string(kv["data.right_square"]),
            square_magnitude=float(kv["data.square_magnitude"]),
            noise_low=float(kv["data.noise_low"]),
            noise_high=float(kv["data.noise_high"]),
            barrier_columns=(c0, c1),
            gateway=RegionSpec.from_string(kv["data.gateway"]),
            n_train_per_class=int(kv["data.n_train_per_class"]),
            n_val_per_class=int(kv["data.n_val_per_class"]),
            seed=int(kv["data.seed"]),
        )


def build_mask(config: SyntheticConfig) -> np.ndarray:
    mask = np.ones((config.height, config.width), dtype=bool)
    barrier = config.barrier_region
    mask[barrier.rows, barrier.cols] = False
    mask[config.gateway.rows, config.gateway.cols] = True
    return mask


def _make_sample(config, mask, label, stream_key):
    # Per-sample substream so generation is order- and parallelism-invariant.
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=stream_key))
    values = np.zeros((config.height, config.width), dtype=np.float64)
    sign = 1.0 if label == 1 else -1.0
    values[config.left_square.rows, config.left_square.cols] = sign * config.square_magnitude
    values[config.right_square.rows, config.right_square.cols] = config.square_magnitude
    values += rng.uniform(config.noise_low, config.noise_high, size=values.shape)
    values[~mask] = 0.0
    return GridSample(values=values, mask=mask, target=sign, label=label)


def generate_synthetic(config: SyntheticConfig):
    """Create (train, validation) datasets; deterministic for a fixed seed."""
    config.validate()
    mask = build_mask(config)

    def build(split, n_per_class, split_key):
        samples = []
        for i in range(2 * n_per_class):
            label = 1 if i % 2 == 0 else 2
            samples.append(_make_sample(config, mask, label, (split_key, i)))
        return GridDataset(samples=samples, split=split)

    train = build("train", config.n_train_per_class, 0)
    validation = build("validation", config.n_val_per_class, 1)
    return train, validation


def split_chronological(ds: GridDataset, train_fraction: float):
    """Split by sample order: earliest train_fraction goes to train.

    The train size is floor(fraction * N), clamped to at least one sample;
    an empty validation split triggers a warning.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(ds)
    n_train = max(1, int(np.floor(train_fraction * n)))
    if n_train >= n:
        warnings.warn(f"chronological split leaves no validation samples (N={n})")
    train = GridDataset(samples=list(ds.samples[:n_train]), split="train")
    validation = GridDataset(samples=list(ds.samples[n_train:]), split="validation")
    return train, validation


def composite_mean(ds: GridDataset, label: int) -> np.ndarray:
    """Cell-wise mean over all samples of one label; invalid cells are NaN."""
    selected = ds.with_label(label)
    if not selected:
        raise ValueError(f"no samples with label {label}")
    out = np.mean([s.values for s in selected], axis=0)
    out[~ds.mask] = np.nan
    return out


# ---------------------------------------------------------------------------
# CSV interchange: one file per variable, row-major, '.' decimal separator.
# values.csv holds N stacked HxW grids, mask.csv one HxW 0/1 grid,
# targets.csv one value per sample.
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _parse_rows(path: Path, expect_width=None):
    rows = []
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split(",")
        try:
            rows.append([float(tok) for tok in fields])
        except ValueError as exc:
            raise NumberParseError(f"{path}:{lineno}: unparsable numeral") from exc
        if expect_width is not None and len(fields) != expect_width:
            raise DimensionMismatch(
                f"{path}:{lineno}: expected {expect_width} fields, got {len(fields)}"
            )
    return rows


def export_grid_csv(ds: GridDataset, values_path, mask_path, targets_path) -> None:
    values_lines = []
    for s in ds.samples:
        for row in s.values:
            values_lines.append(",".join(_fmt(v) for v in row))
    Path(values_path).write_text("\n".join(values_lines) + "\n", encoding="utf-8")
    mask_lines = [",".join("1" if v else "0" for v in row) for row in ds.mask]
    Path(mask_path).write_text("\n".join(mask_lines) + "\n", encoding="utf-8")
    Path(targets_path).write_text(
        "\n".join(_fmt(s.target) for s in ds.samples) + "\n", encoding="utf-8"
    )


def load_grid_csv(values_path, mask_path, targets_path, neutral_threshold: float = 0.5,
                  split: str = "train") -> GridDataset:
    """Load a dataset from the CSV interchange files.

    Labels follow the target sign; samples with |target| < neutral_threshold
    are excluded as neutral.
    """
    values_path, mask_path, targets_path = Path(values_path), Path(mask_path), Path(targets_path)
    for p in (values_path, mask_path, targets_path):
        if not p.exists():
            raise FileNotFoundError(p)
    mask_rows = _parse_rows(mask_path)
    if not mask_rows:
        raise DimensionMismatch(f"{mask_path}: empty mask grid")
    width = len(mask_rows[0])
    mask_rows = _parse_rows(mask_path, expect_width=width)
    mask = np.array(mask_rows) != 0.0
    height = mask.shape[0]

    value_rows = _parse_rows(values_path, expect_width=width)
    if len(value_rows) % height != 0:
        raise DimensionMismatch(
            f"{values_path}: {len(value_rows)} rows is not a multiple of grid height {height}"
        )
    n_samples = len(value_rows) // height
    all_values = np.array(value_rows, dtype=np.float64).reshape(n_samples, height, width)

    target_rows = _parse_rows(targets_path, expect_width=1)
    if len(target_rows) != n_samples:
        raise DimensionMismatch(
            f"{targets_path}: {len(target_rows)} targets for {n_samples} samples"
        )
    targets = np.array(target_rows, dtype=np.float64).ravel()

    samples = []
    for values, target in zip(all_values, targets):
        if abs(target) < neutral_threshold:
            continue
        label = 1 if target > 0 else 2
        samples.append(GridSample(values=values, mask=mask, target=float(target), label=label))
    return GridDataset(samples=samples, split=split)


def export_composite_csv(composite: np.ndarray, path) -> None:
    """Write a composite grid; invalid cells appear as 'nan'."""
    lines = [",".join(_fmt(v) for v in row) for row in composite]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_dataset_manifest(config: SyntheticConfig, path) -> None:
    write_kv(path, config.to_kv())


def read_dataset_manifest(path) -> SyntheticConfig:
    return SyntheticConfig.from_kv(read_kv(path, coerce=False))
