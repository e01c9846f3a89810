"""Model-ready input layouts and relevance reassembly.

Each model family needs its own layout of a masked 2-D sample:

* dense nets take the valid cells flattened row-major (``flatten_valid``),
* conv nets take the full grid with invalid cells zeroed and zero
  rows/columns appended until kernel/stride tiling fits (``pad_for_conv``),
* reservoir nets take a time sequence: one step per column or row, or the
  permuted valid cells split into equal-sized pieces, always preceded by an
  all-ones dummy step that later absorbs residual relevance.

Every layout is a bijection from the valid cells onto a subset of the
layout positions, so relevance computed in layout coordinates can be
scattered back onto the grid exactly (``reassemble_relevance``).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .datagen import GridSample


@dataclass
class FlatVector:
    """Valid cells of one sample in row-major order."""

    values: np.ndarray  # (n_valid,)
    index_map: np.ndarray  # (n_valid, 2) int: vector position -> (row, col)

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class PaddedGrid:
    """Zero-filled grid extended so (dim - kernel) is a stride multiple."""

    values: np.ndarray  # (H', W')
    height: int  # original H
    width: int  # original W
    pad_rows: int
    pad_cols: int


@dataclass(frozen=True)
class PermutationSpec:
    """Shared random ordering of the valid cells for piecewise feeding."""

    seed: int
    order: np.ndarray  # permuted[i] = flat[order[i]]

    @classmethod
    def generate(cls, n_valid: int, seed: int) -> "PermutationSpec":
        order = np.random.default_rng(seed).permutation(n_valid)
        return cls(seed=seed, order=order)

    @property
    def inverse(self) -> np.ndarray:
        inv = np.empty_like(self.order)
        inv[self.order] = np.arange(len(self.order))
        return inv


@dataclass
class InputSequence:
    """Time-major ESN input: steps[t] is the vector fed at step t."""

    steps: np.ndarray  # (T, d)
    strategy: str  # 'columns' | 'rows' | 'pieces'
    dummy_first: bool = True
    trailing_pad_count: int = 0
    permutation: Optional[PermutationSpec] = None

    @property
    def n_steps(self) -> int:
        return self.steps.shape[0]

    @property
    def step_dim(self) -> int:
        return self.steps.shape[1]


@dataclass
class ConservationAudit:
    """Bookkeeping that lets relevance totals be reconciled end to end.

    ``start`` is the relevance injected at the model output, ``sunk`` what
    was dropped during propagation (zero-denominator columns), and the
    remaining fields describe reassembly onto the grid.
    """

    total_in: float = 0.0
    attributed: float = 0.0
    dummy_absorbed: float = 0.0
    pad_discarded: float = 0.0
    start: float = 0.0
    sunk: float = 0.0
    layer_totals: list = field(default_factory=list)

    def to_kv(self, prefix: str = "audit") -> dict:
        return {
            f"{prefix}.start": self.start,
            f"{prefix}.sunk": self.sunk,
            f"{prefix}.total_in": self.total_in,
            f"{prefix}.attributed": self.attributed,
            f"{prefix}.dummy_absorbed": self.dummy_absorbed,
            f"{prefix}.pad_discarded": self.pad_discarded,
        }


@dataclass
class RelevanceMap:
    """Per-cell relevance aligned with the sample geometry."""

    scores: np.ndarray  # (H, W), 0 on invalid cells
    mask: np.ndarray  # (H, W) bool
    strategy: str
    audit: ConservationAudit


def flatten_valid(sample: GridSample) -> FlatVector:
    """Row-major vector of the valid cells only."""
    if not sample.mask.any():
        raise ValueError("sample mask has no valid cells")
    rows, cols = np.nonzero(sample.mask)  # nonzero is row-major
    return FlatVector(
        values=sample.values[rows, cols].astype(np.float64),
        index_map=np.stack([rows, cols], axis=1),
    )


def padded_dims(height: int, width: int, kernel: int, stride: int):
    """Smallest dims >= (height, width) and >= kernel with exact tiling."""

    def grow(dim):
        if dim <= kernel:
            return kernel
        return kernel + int(np.ceil((dim - kernel) / stride)) * stride

    return grow(height), grow(width)


def pad_for_conv(sample: GridSample, kernel: int, stride: int) -> PaddedGrid:
    """Zero invalid cells and append zero rows/cols until tiling fits."""
    if kernel < 1 or stride < 1:
        raise ValueError("kernel and stride must be >= 1")
    h, w = sample.values.shape
    new_h, new_w = padded_dims(h, w, kernel, stride)
    values = np.zeros((new_h, new_w), dtype=np.float64)
    values[:h, :w] = np.where(sample.mask, sample.values, 0.0)
    return PaddedGrid(values=values, height=h, width=w, pad_rows=new_h - h, pad_cols=new_w - w)


def slice_columns(sample: GridSample) -> InputSequence:
    """One step per column, left to right, with a leading all-ones step."""
    filled = np.where(sample.mask, sample.values, 0.0)
    steps = np.vstack([np.ones((1, sample.height)), filled.T])
    return InputSequence(steps=steps, strategy="columns")


def slice_rows(sample: GridSample) -> InputSequence:
    """One step per row, top to bottom, with a leading all-ones step."""
    filled = np.where(sample.mask, sample.values, 0.0)
    steps = np.vstack([np.ones((1, sample.width)), filled])
    return InputSequence(steps=steps, strategy="rows")


def slice_pieces(sample: GridSample, piece_size: int, perm: PermutationSpec) -> InputSequence:
    """Valid cells, permuted, zero-padded and split into equal pieces."""
    if piece_size < 1:
        raise ValueError("piece_size must be >= 1")
    flat = flatten_valid(sample)
    if len(perm.order) != len(flat):
        raise ValueError(
            f"permutation covers {len(perm.order)} cells, sample has {len(flat)} valid"
        )
    permuted = flat.values[perm.order]
    n_pieces = int(np.ceil(len(permuted) / piece_size))
    pad = n_pieces * piece_size - len(permuted)
    padded = np.concatenate([permuted, np.zeros(pad)])
    steps = np.vstack([np.ones((1, piece_size)), padded.reshape(n_pieces, piece_size)])
    return InputSequence(
        steps=steps,
        strategy="pieces",
        trailing_pad_count=pad,
        permutation=perm,
    )


# ---------------------------------------------------------------------------
# Reassembly: relevance in layout coordinates -> RelevanceMap on the grid.
# The dummy step and injected zero positions are dropped but their totals
# are kept in the audit so conservation can still be checked.
# ---------------------------------------------------------------------------


def _scatter_flat(vector: np.ndarray, mask: np.ndarray) -> np.ndarray:
    out = np.zeros(mask.shape, dtype=np.float64)
    out[mask] = vector  # nonzero/boolean indexing is row-major
    return out


def reassemble_flat(relevance: np.ndarray, mask: np.ndarray) -> RelevanceMap:
    n_valid = int(mask.sum())
    if relevance.shape != (n_valid,):
        raise ValueError(f"expected {n_valid} relevance entries, got {relevance.shape}")
    scores = _scatter_flat(relevance, mask)
    audit = ConservationAudit(total_in=float(relevance.sum()), attributed=float(scores.sum()))
    return RelevanceMap(scores=scores, mask=mask, strategy="flat", audit=audit)


def reassemble_padded(relevance: np.ndarray, mask: np.ndarray) -> RelevanceMap:
    """Crop padded-grid relevance back to the original geometry."""
    h, w = mask.shape
    if relevance.ndim == 3:
        relevance = relevance.sum(axis=2)
    if relevance.shape[0] < h or relevance.shape[1] < w:
        raise ValueError(f"padded relevance {relevance.shape} smaller than grid {(h, w)}")
    total_in = float(relevance.sum())
    core = relevance[:h, :w]
    scores = np.where(mask, core, 0.0)
    attributed = float(scores.sum())
    audit = ConservationAudit(
        total_in=total_in,
        attributed=attributed,
        pad_discarded=total_in - attributed,
    )
    return RelevanceMap(scores=scores, mask=mask, strategy="conv", audit=audit)


def reassemble_relevance(step_relevances: np.ndarray, seq: InputSequence,
                         mask: np.ndarray) -> RelevanceMap:
    """Scatter per-step relevance back onto the grid.

    Drops the dummy step and any trailing pad positions (both recorded in
    the audit), inverts the permutation for piecewise layouts, and zeroes
    invalid cells.
    """
    if step_relevances.shape != seq.steps.shape:
        raise ValueError(
            f"relevance shape {step_relevances.shape} does not match sequence "
            f"{seq.steps.shape}"
        )
    h, w = mask.shape
    total_in = float(step_relevances.sum())
    dummy_absorbed = 0.0
    data = step_relevances
    if seq.dummy_first:
        dummy_absorbed = float(step_relevances[0].sum())
        data = step_relevances[1:]

    if seq.strategy == "columns":
        if data.shape != (w, h):
            raise ValueError(f"column layout expects {(w, h)}, got {data.shape}")
        grid = data.T
    elif seq.strategy == "rows":
        if data.shape != (h, w):
            raise ValueError(f"row layout expects {(h, w)}, got {data.shape}")
        grid = data
    elif seq.strategy == "pieces":
        if seq.permutation is None:
            raise ValueError("piecewise sequence lacks its permutation")
        n_valid = int(mask.sum())
        layout = data.ravel()
        if layout.size != n_valid + seq.trailing_pad_count:
            raise ValueError(
                f"piece layout holds {layout.size} slots for {n_valid} valid cells "
                f"+ {seq.trailing_pad_count} pads"
            )
        flat = np.empty(n_valid, dtype=np.float64)
        flat[seq.permutation.order] = layout[:n_valid]
        grid = _scatter_flat(flat, mask)
        scores = np.where(mask, grid, 0.0)
        attributed = float(scores.sum())
        audit = ConservationAudit(
            total_in=total_in,
            attributed=attributed,
            dummy_absorbed=dummy_absorbed,
            pad_discarded=total_in - attributed - dummy_absorbed,
        )
        return RelevanceMap(scores=scores, mask=mask, strategy="pieces", audit=audit)
    else:
        raise ValueError(f"unknown sequence strategy {seq.strategy!r}")

    scores = np.where(mask, grid, 0.0)
    attributed = float(scores.sum())
    audit = ConservationAudit(
        total_in=total_in,
        attributed=attributed,
        dummy_absorbed=dummy_absorbed,
        pad_discarded=total_in - attributed - dummy_absorbed,
    )
    return RelevanceMap(scores=scores, mask=mask, strategy=seq.strategy, audit=audit)


def scatter_to_sequence(map_values: np.ndarray, seq: InputSequence,
                        mask: np.ndarray) -> np.ndarray:
    """Inverse of reassemble_relevance for round-trip checks.

    Places grid values into the sequence layout; dummy, pad, and invalid
    positions receive zero.
    """
    h, w = mask.shape
    valid = np.where(mask, map_values, 0.0)
    if seq.strategy == "columns":
        data = valid.T
    elif seq.strategy == "rows":
        data = valid
    elif seq.strategy == "pieces":
        flat = valid[mask]
        layout = np.concatenate([flat[seq.permutation.order], np.zeros(seq.trailing_pad_count)])
        data = layout.reshape(seq.n_steps - 1, seq.step_dim)
    else:
        raise ValueError(f"unknown sequence strategy {seq.strategy!r}")
    if seq.dummy_first:
        return np.vstack([np.zeros((1, seq.step_dim)), data])
    return data


# ---------------------------------------------------------------------------
# Feeding strategies: one object per experiment that prepares samples and
# reassembles relevance, so harness code stays layout-agnostic.
# ---------------------------------------------------------------------------


class FeedStrategy:
    """Base class; concrete strategies define the layout bijection."""

    name = "base"
    kind = "sequence"  # 'flat' | 'grid' | 'sequence'

    def prepare(self, sample: GridSample):
        raise NotImplementedError

    def reassemble(self, relevance, sample_or_mask) -> RelevanceMap:
        raise NotImplementedError

    def params(self) -> dict:
        return {"strategy": self.name}


def _mask_of(sample_or_mask) -> np.ndarray:
    if isinstance(sample_or_mask, GridSample):
        return sample_or_mask.mask
    return sample_or_mask


class FlatStrategy(FeedStrategy):
    """Dense-net layout: flattened valid cells."""

    name = "flat"
    kind = "flat"

    def prepare(self, sample):
        return flatten_valid(sample)

    def reassemble(self, relevance, sample_or_mask):
        return reassemble_flat(relevance, _mask_of(sample_or_mask))


class ConvStrategy(FeedStrategy):
    """Conv-net layout: zero-filled, tiling-padded grid."""

    name = "conv"
    kind = "grid"

    def __init__(self, kernel: int = 3, stride: int = 3):
        self.kernel = kernel
        self.stride = stride

    def prepare(self, sample):
        return pad_for_conv(sample, self.kernel, self.stride)

    def reassemble(self, relevance, sample_or_mask):
        return reassemble_padded(relevance, _mask_of(sample_or_mask))

    def params(self):
        return {"strategy": self.name, "kernel": self.kernel, "stride": self.stride}


class _SequenceStrategy(FeedStrategy):
    def reassemble(self, relevance, sample_or_mask):
        mask = _mask_of(sample_or_mask)
        seq = self._layout(mask)
        return reassemble_relevance(relevance, seq, mask)

    def scatter(self, map_values, sample_or_mask):
        mask = _mask_of(sample_or_mask)
        return scatter_to_sequence(map_values, self._layout(mask), mask)

    def _layout(self, mask):
        """Sequence skeleton (shapes/permutation) for a geometry."""
        raise NotImplementedError


class ColumnStrategy(_SequenceStrategy):
    name = "columns"

    def prepare(self, sample):
        return slice_columns(sample)

    def _layout(self, mask):
        h, w = mask.shape
        return InputSequence(steps=np.zeros((w + 1, h)), strategy="columns")


class RowStrategy(_SequenceStrategy):
    name = "rows"

    def prepare(self, sample):
        return slice_rows(sample)

    def _layout(self, mask):
        h, w = mask.shape
        return InputSequence(steps=np.zeros((h + 1, w)), strategy="rows")


class PieceStrategy(_SequenceStrategy):
    """Permuted equal-sized pieces; one shared permutation per experiment."""

    name = "pieces"

    def __init__(self, piece_size: int = 96, permutation_seed: int = 7):
        self.piece_size = piece_size
        self.permutation_seed = permutation_seed

    def permutation_for(self, n_valid: int) -> PermutationSpec:
        return PermutationSpec.generate(n_valid, self.permutation_seed)

    def prepare(self, sample):
        return slice_pieces(sample, self.piece_size, self.permutation_for(sample.n_valid))

    def _layout(self, mask):
        n_valid = int(mask.sum())
        n_pieces = int(np.ceil(n_valid / self.piece_size))
        pad = n_pieces * self.piece_size - n_valid
        return InputSequence(
            steps=np.zeros((n_pieces + 1, self.piece_size)),
            strategy="pieces",
            trailing_pad_count=pad,
            permutation=self.permutation_for(n_valid),
        )

    def params(self):
        return {
            "strategy": self.name,
            "piece_size": self.piece_size,
            "permutation_seed": self.permutation_seed,
        }


def strategy_from_params(params: dict) -> FeedStrategy:
    name = params["strategy"]
    if name == "flat":
        return FlatStrategy()
    if name == "conv":
        return ConvStrategy(kernel=int(params.get("kernel", 3)), stride=int(params.get("stride", 3)))
    if name == "columns":
        return ColumnStrategy()
    if name == "rows":
        return RowStrategy()
    if name == "pieces":
        return PieceStrategy(
            piece_size=int(params.get("piece_size", 96)),
            permutation_seed=int(params.get("permutation_seed", 7)),
        )
    raise ValueError(f"unknown strategy {name!r}")
