"""Experiment orchestration: train a model on the synthetic task, compute
mean relevance maps and region statistics, and write reproducible run
manifests.

Every number an experiment emits is recoverable from its manifest: the
manifest stores the full resolved configuration including all seeds, and
``run_from_manifest`` re-executes it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import models as M
from .datagen import (
    ConfigError,
    GridDataset,
    RegionSpec,
    SyntheticConfig,
    generate_synthetic,
)
from .kvformat import read_kv, write_kv
from .lrp import lrp_map, map_to_csv, map_to_pgm, mean_relevance_map, rule_for_label
from .preprocess import FeedStrategy, RelevanceMap, strategy_from_params
from .training import (
    Metrics,
    TrainConfig,
    evaluate,
    loss_history_csv,
    train_esn_readout,
    train_feedforward,
)


class StageError(RuntimeError):
    """Wraps a failure with the pipeline stage it happened in."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class RegionSet:
    """Regions of interest for relevance ratios."""

    left: RegionSpec
    right: RegionSpec
    gateway: RegionSpec

    @classmethod
    def from_config(cls, config: SyntheticConfig) -> "RegionSet":
        return cls(left=config.left_square, right=config.right_square, gateway=config.gateway)


def region_sum(rmap: RelevanceMap, region: RegionSpec) -> float:
    return float(rmap.scores[region.rows, region.cols].sum())


def region_ratios(rmap: RelevanceMap, regions: RegionSet):
    """(both squares / total, left square / both squares) relevance sums."""
    total = float(rmap.scores[rmap.mask].sum())
    if total == 0:
        raise ValueError("map carries zero total relevance")
    left = region_sum(rmap, regions.left)
    both = left + region_sum(rmap, regions.right)
    if both == 0:
        raise ValueError("map carries zero relevance on the squares")
    return both / total, left / both


def gateway_statistic(rmap: RelevanceMap, gateway: RegionSpec) -> float:
    """Mean per-cell relevance inside the gateway over the valid-cell mean."""
    sub_mask = rmap.mask[gateway.rows, gateway.cols]
    if not sub_mask.any():
        raise ValueError("gateway region holds no valid cells")
    gateway_mean = float(rmap.scores[gateway.rows, gateway.cols][sub_mask].mean())
    overall = float(rmap.scores[rmap.mask].mean())
    if overall == 0:
        raise ValueError("map carries zero relevance")
    return gateway_mean / overall


def stripe_statistic(rmap: RelevanceMap, axis: str = "horizontal") -> float:
    """Share of map variance explained by per-row (or per-column) means.

    'horizontal' measures banding across rows (constant-within-row maps
    score 1); an i.i.d. map scores about 1/width. 'vertical' is the
    transposed statistic.
    """
    scores, mask = rmap.scores, rmap.mask
    if axis == "vertical":
        scores, mask = scores.T, mask.T
    elif axis != "horizontal":
        raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")
    valid = scores[mask]
    total_var = float(valid.var())
    if total_var == 0:
        raise ValueError("map is constant; stripe statistic undefined")
    row_means = []
    for r in range(scores.shape[0]):
        row_mask = mask[r]
        if row_mask.any():
            row_means.append(scores[r][row_mask].mean())
    return float(np.var(row_means) / total_var)


@dataclass
class ExperimentSpec:
    """Everything needed to reproduce one trained-model-plus-maps run."""

    model_kind: str  # 'mlp' | 'cnn' | 'esn'
    strategy_params: dict
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ridge_lambda: float = 1e-6
    leak_rate: float = 0.005
    reservoir_size: int = 300
    hidden_widths: tuple = (2,)
    channels: int = 2
    model_seed: int = 0
    map_label: int = 1
    map_split: str = "train"  # which split feeds the mean map
    outdir: str = None

    def validate(self):
        strategy = self.strategy_params.get("strategy")
        legal = {
            "mlp": {"flat"},
            "cnn": {"conv"},
            "esn": {"columns", "rows", "pieces"},
        }
        if self.model_kind not in legal:
            raise ConfigError(f"unknown model kind {self.model_kind!r}")
        if strategy not in legal[self.model_kind]:
            raise ConfigError(
                f"strategy {strategy!r} is not legal for model {self.model_kind!r}"
            )
        if self.map_label not in (1, 2):
            raise ConfigError(f"map_label must be 1 or 2, got {self.map_label}")
        if self.map_split not in ("train", "validation"):
            raise ConfigError(f"map_split must be train or validation")
        self.data.validate()

    def to_kv(self) -> dict:
        kv = {
            "experiment.model_kind": self.model_kind,
            "experiment.model_seed": self.model_seed,
            "experiment.map_label": self.map_label,
            "experiment.map_split": self.map_split,
        }
        for key, value in self.strategy_params.items():
            kv[f"strategy.{key}"] = value
        kv.update(self.data.to_kv())
        if self.model_kind == "esn":
            kv["experiment.ridge_lambda"] = self.ridge_lambda
            kv["experiment.leak_rate"] = self.leak_rate
            kv["experiment.reservoir_size"] = self.reservoir_size
        else:
            kv.update(self.train.to_kv())
            if self.model_kind == "mlp":
                kv["experiment.hidden_widths"] = ",".join(str(w) for w in self.hidden_widths)
            else:
                kv["experiment.channels"] = self.channels
        return kv

    @classmethod
    def from_kv(cls, kv: dict) -> "ExperimentSpec":
        strategy_params = {
            key.split(".", 1)[1]: value for key, value in kv.items() if key.startswith("strategy.")
        }
        spec = cls(
            model_kind=str(kv["experiment.model_kind"]),
            strategy_params=strategy_params,
            data=SyntheticConfig.from_kv(kv),
            model_seed=int(kv["experiment.model_seed"]),
            map_label=int(kv["experiment.map_label"]),
            map_split=str(kv["experiment.map_split"]),
        )
        if spec.model_kind == "esn":
            spec.ridge_lambda = float(kv["experiment.ridge_lambda"])
            spec.leak_rate = float(kv["experiment.leak_rate"])
            spec.reservoir_size = int(kv["experiment.reservoir_size"])
        else:
            spec.train = TrainConfig(
                learning_rate=float(kv["train.learning_rate"]),
                epochs=int(kv["train.epochs"]),
                batch_size=int(kv["train.batch_size"]),
                l1_coeff=float(kv["train.l1_coeff"]),
                seed=int(kv["train.seed"]),
                optimizer=str(kv["train.optimizer"]),
            )
            if spec.model_kind == "mlp":
                spec.hidden_widths = tuple(
                    int(w) for w in str(kv["experiment.hidden_widths"]).split(",")
                )
            else:
                spec.channels = int(kv["experiment.channels"])
        return spec


@dataclass
class RunManifest:
    """Flat record of a finished experiment."""

    entries: dict

    def save(self, path):
        write_kv(path, self.entries)

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(entries=read_kv(path))

    def __getitem__(self, key):
        return self.entries[key]


def build_model(spec: ExperimentSpec, input_geometry):
    """input_geometry: (n_valid, height, width) of the dataset."""
    n_valid, height, width = input_geometry
    if spec.model_kind == "mlp":
        return M.MlpModel.create(n_valid, hidden_widths=spec.hidden_widths, seed=spec.model_seed)
    if spec.model_kind == "cnn":
        params = spec.strategy_params
        return M.ConvModel.create(
            height,
            width,
            kernel_size=int(params.get("kernel", 3)),
            stride=int(params.get("stride", 3)),
            channels=spec.channels,
            seed=spec.model_seed,
        )
    strategy = strategy_from_params(spec.strategy_params)
    if spec.strategy_params["strategy"] == "columns":
        input_dim = height
    elif spec.strategy_params["strategy"] == "rows":
        input_dim = width
    else:
        input_dim = strategy.piece_size
    return M.EsnModel.create(
        input_dim,
        reservoir_size=spec.reservoir_size,
        leak_rate=spec.leak_rate,
        seed=spec.model_seed,
    )


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_experiment(spec: ExperimentSpec, write_artifacts: bool = True) -> RunManifest:
    """Generate data, train, evaluate, produce maps and region statistics.

    Returns the manifest; with write_artifacts also writes map CSV/PGM,
    loss history, checkpoint, and the manifest file into spec.outdir.
    """
    _stage("config", spec.validate)
    train_ds, val_ds = _stage("data", generate_synthetic, spec.data)
    strategy = _stage("preprocess", strategy_from_params, spec.strategy_params)
    geometry = (int(train_ds.mask.sum()), train_ds.height, train_ds.width)
    model = _stage("train", build_model, spec, geometry)

    history = None
    if spec.model_kind == "esn":
        _stage("train", train_esn_readout, model, train_ds, strategy, spec.ridge_lambda)
    else:
        _, history = _stage("train", train_feedforward, model, train_ds, spec.train)

    metrics = _stage("evaluate", evaluate, model, train_ds, val_ds, strategy)

    map_ds = train_ds if spec.map_split == "train" else val_ds
    rmap = _stage(
        "lrp", mean_relevance_map, model, map_ds, spec.map_label, strategy
    )

    regions = RegionSet.from_config(spec.data)
    both_total, left_both = _stage("metrics", region_ratios, rmap, regions)
    gateway = _stage("metrics", gateway_statistic, rmap, regions.gateway)
    stripe_h = _stage("metrics", stripe_statistic, rmap, "horizontal")
    stripe_v = _stage("metrics", stripe_statistic, rmap, "vertical")

    entries = dict(spec.to_kv())
    entries.update(metrics.to_kv())
    entries.update(rmap.audit.to_kv())
    entries.update(
        {
            "model.parameter_count": M.count_parameters(model),
            "metrics.both_over_total": both_total,
            "metrics.left_over_both": left_both,
            "metrics.gateway_statistic": gateway,
            "metrics.stripe_horizontal": stripe_h,
            "metrics.stripe_vertical": stripe_v,
            "tool.version": __version__,
            "tool.timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
        }
    )
    manifest = RunManifest(entries=entries)

    if write_artifacts and spec.outdir is not None:
        outdir = Path(spec.outdir)
        _stage("export", outdir.mkdir, parents=True, exist_ok=True)
        _stage("export", map_to_csv, rmap, outdir / "mean_relevance_class%d.csv" % spec.map_label)
        _stage("export", map_to_pgm, rmap, outdir / "mean_relevance_class%d.pgm" % spec.map_label)
        if history is not None:
            _stage("export", loss_history_csv, history, outdir / "loss_history.csv")
        _stage("export", M.save_model, model, outdir / "model.npz", spec.strategy_params)
        _stage("export", manifest.save, outdir / "manifest.txt")
    return manifest


def run_from_manifest(path, outdir=None) -> RunManifest:
    """Re-execute an experiment from its manifest alone."""
    spec = ExperimentSpec.from_kv(read_kv(path))
    spec.outdir = outdir
    return run_experiment(spec, write_artifacts=outdir is not None)
