"""Relevance propagation for dense, conv, and leaky-reservoir models.

The prediction Y is taken as the total relevance and redistributed layer
by layer down to the inputs. For a dense connection the share of input i
in the relevance of output j is

    z_ij / sum_i z_ij    with    z_ij = max(a_i * w_ij, 0)

for positive-class maps; negative-class maps start from |Y| and use the
magnitudes of the negative pre-activation contributions instead. Outputs
whose selected contributions sum to zero cannot distribute their
relevance; that amount is recorded as "sunk" in the audit rather than
redistributed. Bias terms never receive relevance.

Recurrent reservoirs are unfolded in time: each step's state splits its
relevance between the carried fraction (1-a) x(t-1) and the update term
a * tanh(...); the update share is then divided among the input and
recurrence contributions inside the activation. Input shares are
attributed to that step's inputs, everything else flows backward, which
produces a roughly exponential decay of residual relevance with rate a.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models as M
from .datagen import GridDataset, GridSample
from .models import conv_patches
from .preprocess import (
    ConservationAudit,
    FeedStrategy,
    InputSequence,
    RelevanceMap,
)


@dataclass(frozen=True)
class SignRule:
    """Which pre-activation contributions carry relevance.

    variant 'positive' (class 1): z+ = max(a*w, 0), start value Y.
    variant 'negative' (class 2): |z-| = max(-a*w, 0), start value |Y|.
    """

    variant: str

    def __post_init__(self):
        if self.variant not in ("positive", "negative"):
            raise ValueError(f"unknown sign rule {self.variant!r}")

    @property
    def sign(self) -> float:
        return 1.0 if self.variant == "positive" else -1.0

    def start_value(self, prediction: float) -> float:
        if self.variant == "negative":
            return abs(prediction)
        return prediction

    def check_prediction(self, prediction: float) -> None:
        expected_positive = self.variant == "positive"
        if (prediction < 0) == expected_positive:
            warnings.warn(
                f"prediction {prediction:+.4f} has the wrong sign for the "
                f"{self.variant} rule; propagating as configured"
            )


POSITIVE = SignRule("positive")
NEGATIVE = SignRule("negative")


def rule_for_label(label: int) -> SignRule:
    return POSITIVE if label == 1 else NEGATIVE


@dataclass
class ResidualCurve:
    """Residual relevance over time steps for one leak rate."""

    alpha: float
    n_steps: int
    values: np.ndarray  # values[t-1] = R(t)
    kind: str  # 'analytic' | 'empirical' | 'rate'


@dataclass
class EsnRelevance:
    """Backward-unfolding output for one sequence."""

    step_relevances: np.ndarray  # (T, d), aligned with the input sequence
    residual: ResidualCurve  # empirical residual trace
    start: float
    sunk: float


def lrp_dense(activations: np.ndarray, weights: np.ndarray, upstream: np.ndarray,
              rule: SignRule = POSITIVE):
    """Propagate relevance through one dense connection.

    Returns (lower relevance (n_in,), sunk amount). Outputs with no
    selected contribution sink their relevance.
    """
    upstream = np.asarray(upstream, dtype=np.float64)
    if not np.all(np.isfinite(activations)) or not np.all(np.isfinite(upstream)):
        raise ValueError("non-finite inputs to relevance propagation")
    z = rule.sign * activations[:, None] * weights
    np.maximum(z, 0.0, out=z)
    denom = z.sum(axis=0)
    live = denom > 0
    weighted = np.zeros_like(upstream)
    weighted[live] = upstream[live] / denom[live]
    lower = z @ weighted
    sunk = float(upstream[~live].sum())
    return lower, sunk


def lrp_conv(input_act: np.ndarray, kernel: np.ndarray, stride: int,
             upstream: np.ndarray, rule: SignRule = POSITIVE):
    """Propagate relevance through a valid-convolution stage.

    Equivalent to lrp_dense on the unrolled sparse weight matrix: each
    output unit distributes over its own receptive field.
    """
    k = kernel.shape[0]
    patches = conv_patches(input_act, k, stride)  # (nH, nW, k, k, c_in)
    z = rule.sign * patches[..., None] * kernel[None, None]  # (nH, nW, k, k, c_in, c_out)
    np.maximum(z, 0.0, out=z)
    denom = z.sum(axis=(2, 3, 4))  # (nH, nW, c_out)
    live = denom > 0
    weighted = np.zeros_like(upstream)
    weighted[live] = upstream[live] / denom[live]
    contrib = np.einsum("hwijco,hwo->hwijc", z, weighted)
    lower = np.zeros_like(input_act)
    n_h, n_w = contrib.shape[:2]
    for i in range(k):
        for j in range(k):
            lower[i : i + stride * n_h : stride, j : j + stride * n_w : stride, :] += contrib[
                :, :, i, j, :
            ]
    sunk = float(upstream[~live].sum())
    return lower, sunk


def _dense_chain_backward(layers, inputs, upstream, rule):
    """Run lrp_dense through a reversed dense chain.

    Returns (input relevance, per-layer totals outermost-first, sunk list).
    """
    totals = [float(np.sum(upstream))]
    sunk = []
    rel = upstream
    for layer, act in zip(reversed(layers), reversed(inputs)):
        rel, s = lrp_dense(act, layer.weights, rel, rule)
        sunk.append(s)
        totals.append(float(rel.sum()))
    return rel, totals, sunk


def lrp_feedforward(model, sample: GridSample, strategy: FeedStrategy,
                    rule: SignRule = None) -> RelevanceMap:
    """Full backward pass for an MLP or CNN, reassembled onto the grid.

    The audit records the start value, per-layer totals (output to input),
    and all sunk relevance, so conservation can be verified at every layer.
    """
    if rule is None:
        rule = rule_for_label(sample.label)
    prepared = strategy.prepare(sample)
    if isinstance(model, M.MlpModel):
        y, trace = M.mlp_forward(model, prepared)
        rule.check_prediction(y)
        start = rule.start_value(y)
        rel, totals, sunk = _dense_chain_backward(
            model.layers, trace.inputs, np.array([start]), rule
        )
        rmap = strategy.reassemble(rel, sample)
    elif isinstance(model, M.ConvModel):
        y, trace = M.conv_forward(model, prepared)
        rule.check_prediction(y)
        start = rule.start_value(y)
        rel, totals, sunk = _dense_chain_backward(
            model.head, trace.head.inputs, np.array([start]), rule
        )
        rel = rel.reshape(trace.feature_shape)
        for stage, stage_input in zip(reversed(model.stages), reversed(trace.stage_inputs)):
            rel, s = lrp_conv(stage_input, stage.kernel, stage.stride, rel, rule)
            sunk.append(s)
            totals.append(float(rel.sum()))
        rmap = strategy.reassemble(rel, sample)
    else:
        raise TypeError(f"lrp_feedforward expects MLP or CNN, got {type(model)!r}")
    rmap.audit.start = start
    rmap.audit.sunk = float(np.sum(sunk))
    rmap.audit.layer_totals = totals
    return rmap


def lrp_esn(model: M.EsnModel, seq: InputSequence, rule: SignRule = POSITIVE) -> EsnRelevance:
    """Unfold the reservoir in time and attribute relevance to each step.

    The class rule selects reservoir units at the readout. Inside the
    unfolding, each unit's relevance splits over the two additive parts of
    the transition by their mixing coefficients: fraction (1-a) follows
    the carried state to x(t-1) and fraction a follows the update term.
    The update share then splits over the input and recurrence
    contributions inside the activation, proportionally to the magnitudes
    of the contributions whose sign matches the activation they produced
    (so units of either sign pass relevance on instead of sinking it).
    The coefficient split is what yields the characteristic exponential
    residual decay exp(-a (T-t)); splitting by contribution values instead
    would be dominated by the state/update magnitude ratio, which for
    zero-mean inputs never reaches the regime where that decay holds.

    The residual trace records the relevance still held by x(t) after step
    t+1 has been processed, normalized by the start value.
    """
    y, trace = M.esn_forward(model, seq)
    rule.check_prediction(y)
    start = rule.start_value(y)
    steps = trace.inputs
    n_steps = steps.shape[0]
    alpha = model.leak_rate
    sunk = 0.0

    state_rel, s = lrp_dense(
        trace.states[-1], model.readout_weights[:, None], np.array([start]), rule
    )
    sunk += s

    step_rel = np.zeros_like(steps)
    residual = np.zeros(n_steps)
    denom_start = start if start != 0 else 1.0
    residual[n_steps - 1] = state_rel.sum() / denom_start

    for t in range(n_steps - 1, 0, -1):
        # Stage 1: the transition coefficients split each unit's relevance
        # between the carried state and the update term.
        rel_carry = (1.0 - alpha) * state_rel
        rel_update = alpha * state_rel
        # Stage 2: split the update share over the pre-activation terms,
        # selected by the sign of the activation they produced.
        sign_act = np.sign(trace.activations[t])[:, None]
        z_in = sign_act * model.input_weights * steps[t][None, :]
        z_rec = sign_act * model.reservoir_weights * trace.states[t - 1][None, :]
        np.maximum(z_in, 0.0, out=z_in)
        np.maximum(z_rec, 0.0, out=z_rec)
        denom2 = z_in.sum(axis=1) + z_rec.sum(axis=1)
        live2 = denom2 > 0
        scale2 = np.zeros_like(rel_update)
        scale2[live2] = rel_update[live2] / denom2[live2]
        sunk += float(rel_update[~live2].sum())
        step_rel[t] = z_in.T @ scale2
        state_rel = rel_carry + z_rec.T @ scale2
        residual[t - 1] = state_rel.sum() / denom_start

    # First step: no carry, no recurrence; everything lands on u(1).
    sign_act = np.sign(trace.activations[0])[:, None]
    z_in = sign_act * model.input_weights * steps[0][None, :]
    np.maximum(z_in, 0.0, out=z_in)
    denom = z_in.sum(axis=1)
    live = denom > 0
    scale = np.zeros_like(state_rel)
    scale[live] = state_rel[live] / denom[live]
    sunk += float(state_rel[~live].sum())
    step_rel[0] = z_in.T @ scale

    curve = ResidualCurve(alpha=alpha, n_steps=n_steps, values=residual, kind="empirical")
    return EsnRelevance(step_relevances=step_rel, residual=curve, start=start, sunk=sunk)


def lrp_map(model, sample: GridSample, strategy: FeedStrategy,
            rule: SignRule = None) -> RelevanceMap:
    """Relevance map for one sample, whatever the model family."""
    if isinstance(model, M.EsnModel):
        if rule is None:
            rule = rule_for_label(sample.label)
        seq = strategy.prepare(sample)
        result = lrp_esn(model, seq, rule)
        rmap = strategy.reassemble(result.step_relevances, sample)
        rmap.audit.start = result.start
        rmap.audit.sunk = result.sunk
        return rmap
    return lrp_feedforward(model, sample, strategy, rule)


def mean_relevance_map(model, dataset: GridDataset, label: int, strategy: FeedStrategy,
                       rule: SignRule = None) -> RelevanceMap:
    """Cell-wise mean of per-sample maps over all samples of one label."""
    selected = dataset.with_label(label)
    if not selected:
        raise ValueError(f"no samples with label {label}")
    if rule is None:
        rule = rule_for_label(label)
    mean_scores = None
    audit = ConservationAudit()
    layer_totals = None
    for sample in selected:
        rmap = lrp_map(model, sample, strategy, rule)
        if mean_scores is None:
            mean_scores = rmap.scores.copy()
            layer_totals = list(rmap.audit.layer_totals)
        else:
            mean_scores += rmap.scores
            for i, v in enumerate(rmap.audit.layer_totals):
                layer_totals[i] += v
        audit.total_in += rmap.audit.total_in
        audit.attributed += rmap.audit.attributed
        audit.dummy_absorbed += rmap.audit.dummy_absorbed
        audit.pad_discarded += rmap.audit.pad_discarded
        audit.start += rmap.audit.start
        audit.sunk += rmap.audit.sunk
    n = len(selected)
    mean_scores /= n
    for field_name in ("total_in", "attributed", "dummy_absorbed", "pad_discarded",
                       "start", "sunk"):
        setattr(audit, field_name, getattr(audit, field_name) / n)
    audit.layer_totals = [v / n for v in layer_totals]
    return RelevanceMap(
        scores=mean_scores, mask=dataset.mask, strategy=strategy.name, audit=audit
    )


def analytic_residual(alpha: float, n_steps: int, convention: str = "standard") -> ResidualCurve:
    """Closed-form residual relevance R(t) = exp(-alpha * (T - t)).

    The step count entering the exponent is ambiguous by one (does the
    final step contribute a decay factor or not); 'standard' evaluates the
    formula as written, 'shifted' uses exp(-alpha * (T - t + 1)) so that
    R(1) = exp(-alpha * T).
    """
    if alpha <= 0:
        raise ValueError("alpha must be > 0")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    t = np.arange(1, n_steps + 1, dtype=np.float64)
    offset = 0.0 if convention == "standard" else 1.0
    if convention not in ("standard", "shifted"):
        raise ValueError(f"unknown convention {convention!r}")
    values = np.exp(-alpha * (n_steps - t + offset))
    return ResidualCurve(alpha=alpha, n_steps=n_steps, values=values, kind="analytic")


def residual_rate(alpha: float, n_steps: int) -> ResidualCurve:
    """First derivative of the analytic residual: alpha * exp(-alpha (T-t))."""
    base = analytic_residual(alpha, n_steps)
    return ResidualCurve(
        alpha=alpha, n_steps=n_steps, values=alpha * base.values, kind="rate"
    )


# ---------------------------------------------------------------------------
# Exports: CSV (row-major, invalid cells empty) and 8-bit PGM (min-max
# normalized, invalid cells = 0).
# ---------------------------------------------------------------------------


def map_to_csv(rmap: RelevanceMap, path) -> None:
    lines = []
    for r in range(rmap.scores.shape[0]):
        fields = [
            repr(float(rmap.scores[r, c])) if rmap.mask[r, c] else ""
            for c in range(rmap.scores.shape[1])
        ]
        lines.append(",".join(fields))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_map_csv(path):
    """Returns (scores, mask); empty fields and NaN mark invalid cells."""
    rows, mask_rows = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line.strip(","):
            values = [0.0] * len(line.split(","))
            valid = [False] * len(values)
        else:
            values, valid = [], []
            for tok in line.split(","):
                tok = tok.strip()
                if tok == "" or tok.lower() == "nan":
                    values.append(0.0)
                    valid.append(False)
                else:
                    values.append(float(tok))
                    valid.append(True)
        rows.append(values)
        mask_rows.append(valid)
    return np.array(rows, dtype=np.float64), np.array(mask_rows, dtype=bool)


def map_to_pgm(rmap: RelevanceMap, path) -> None:
    scores, mask = rmap.scores, rmap.mask
    levels = np.zeros(scores.shape, dtype=np.int64)
    if mask.any():
        valid = scores[mask]
        low, high = float(valid.min()), float(valid.max())
        if high > low:
            levels[mask] = np.rint((scores[mask] - low) / (high - low) * 255).astype(np.int64)
    h, w = scores.shape
    body = "\n".join(" ".join(str(v) for v in row) for row in levels)
    Path(path).write_text(f"P2\n{w} {h}\n255\n{body}\n", encoding="utf-8")
