"""Forward passes for the three model families, recording activation traces.

All models regress a masked 2-D sample onto a signed scalar target; the
class is the sign of the prediction. Traces keep every intermediate
activation so the relevance backward pass never needs to re-run a forward
pass.

* MlpModel: dense layers on the flattened valid cells.
* ConvModel: valid (no-overhang) convolution stages on the padded grid,
  flattened into a dense head.
* EsnModel: leaky reservoir with fixed random input/recurrent weights;
  only the linear readout is trainable. States follow

      x(1) = a * tanh(Win u(1) + bin)
      x(t) = (1-a) x(t-1) + a * tanh(Win u(t) + bin + Wres x(t-1) + bres)

  with leak rate a in [0, 1].
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .preprocess import FlatVector, InputSequence, PaddedGrid, padded_dims

CHECKPOINT_VERSION = 1


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    if name == "linear":
        return z
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, post: np.ndarray) -> np.ndarray:
    """d act / d pre expressed through the post-activation value."""
    if name == "tanh":
        return 1.0 - post * post
    if name == "linear":
        return np.ones_like(post)
    raise ValueError(f"unknown activation {name!r}")


def _glorot(rng, n_in, n_out, shape=None):
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=shape if shape is not None else (n_in, n_out))


@dataclass
class DenseLayer:
    weights: np.ndarray  # (n_in, n_out)
    bias: np.ndarray  # (n_out,)
    activation: str  # 'tanh' | 'linear'


@dataclass
class MlpModel:
    layers: list
    kind: str = "mlp"

    @classmethod
    def create(cls, input_width: int, hidden_widths=(2,), seed: int = 0) -> "MlpModel":
        rng = np.random.default_rng(seed)
        widths = [input_width, *hidden_widths, 1]
        layers = []
        for i in range(len(widths) - 1):
            last = i == len(widths) - 2
            layers.append(
                DenseLayer(
                    weights=_glorot(rng, widths[i], widths[i + 1]),
                    bias=np.zeros(widths[i + 1]),
                    activation="linear" if last else "tanh",
                )
            )
        return cls(layers=layers)

    @property
    def input_width(self) -> int:
        return self.layers[0].weights.shape[0]


@dataclass
class ConvStage:
    kernel: np.ndarray  # (k, k, c_in, c_out)
    bias: np.ndarray  # (c_out,)
    stride: int
    activation: str


@dataclass
class ConvModel:
    stages: list
    head: list  # DenseLayer chain on flattened feature maps
    input_height: int  # padded dims the model expects
    input_width: int
    kind: str = "cnn"

    @classmethod
    def create(cls, grid_height: int, grid_width: int, kernel_size: int = 3, stride: int = 3,
               channels: int = 2, head_widths=(), seed: int = 0) -> "ConvModel":
        rng = np.random.default_rng(seed)
        in_h, in_w = padded_dims(grid_height, grid_width, kernel_size, stride)
        fan_in = kernel_size * kernel_size
        stage = ConvStage(
            kernel=_glorot(rng, fan_in, fan_in * channels,
                           shape=(kernel_size, kernel_size, 1, channels)),
            bias=np.zeros(channels),
            stride=stride,
            activation="tanh",
        )
        n_h = (in_h - kernel_size) // stride + 1
        n_w = (in_w - kernel_size) // stride + 1
        widths = [n_h * n_w * channels, *head_widths, 1]
        head = []
        for i in range(len(widths) - 1):
            last = i == len(widths) - 2
            head.append(
                DenseLayer(
                    weights=_glorot(rng, widths[i], widths[i + 1]),
                    bias=np.zeros(widths[i + 1]),
                    activation="linear" if last else "tanh",
                )
            )
        return cls(stages=[stage], head=head, input_height=in_h, input_width=in_w)

    @property
    def kernel_size(self) -> int:
        return self.stages[0].kernel.shape[0]

    @property
    def stride(self) -> int:
        return self.stages[0].stride


@dataclass
class EsnModel:
    input_weights: np.ndarray  # (n_res, d), fixed
    input_bias: np.ndarray  # (n_res,), fixed
    reservoir_weights: np.ndarray  # (n_res, n_res), fixed, sparse
    reservoir_bias: np.ndarray  # (n_res,), fixed
    leak_rate: float
    readout_weights: np.ndarray  # (n_res,), trained
    readout_bias: float  # trained
    kind: str = "esn"

    @classmethod
    def create(cls, input_dim: int, reservoir_size: int = 300, leak_rate: float = 0.005,
               seed: int = 0, spectral_radius: float = 0.9, density: float = 0.1,
               weight_scale: float = 0.5) -> "EsnModel":
        if not 0.0 <= leak_rate <= 1.0:
            raise ValueError(f"leak_rate must be in [0, 1], got {leak_rate}")
        rng = np.random.default_rng(seed)
        w_in = rng.uniform(-weight_scale, weight_scale, size=(reservoir_size, input_dim))
        b_in = rng.uniform(-weight_scale, weight_scale, size=reservoir_size)
        w_res = rng.uniform(-weight_scale, weight_scale, size=(reservoir_size, reservoir_size))
        w_res *= rng.random(w_res.shape) < density
        radius = np.max(np.abs(np.linalg.eigvals(w_res)))
        if radius > 0:
            w_res *= spectral_radius / radius
        b_res = rng.uniform(-weight_scale, weight_scale, size=reservoir_size)
        return cls(
            input_weights=w_in,
            input_bias=b_in,
            reservoir_weights=w_res,
            reservoir_bias=b_res,
            leak_rate=float(leak_rate),
            readout_weights=np.zeros(reservoir_size),
            readout_bias=0.0,
        )

    @property
    def reservoir_size(self) -> int:
        return self.input_weights.shape[0]

    @property
    def input_dim(self) -> int:
        return self.input_weights.shape[1]


@dataclass
class LayerTrace:
    """Dense-chain activations: inputs[l] feeds layer l; output is the scalar Y."""

    inputs: list  # inputs[l]: (n_l,) activation entering layer l
    output: float


@dataclass
class ConvTrace:
    """Per-stage inputs plus the dense-head trace."""

    stage_inputs: list  # (H, W, c_in) arrays entering each conv stage
    feature_shape: tuple  # (nH, nW, c_out) of the final feature maps
    head: LayerTrace


@dataclass
class StateTrace:
    """Per-step reservoir quantities needed by the backward unfolding."""

    states: np.ndarray  # (T, n_res) x(t)
    activations: np.ndarray  # (T, n_res) tanh(...) term of each step
    carries: np.ndarray  # (T, n_res) (1-a) x(t-1); zero row at t=1
    inputs: np.ndarray  # (T, d) the fed sequence


def _as_vector(x) -> np.ndarray:
    if isinstance(x, FlatVector):
        return x.values
    return np.asarray(x, dtype=np.float64)


def mlp_forward(model: MlpModel, x) -> tuple:
    """Run the dense chain on one sample; returns (Y, LayerTrace)."""
    a = _as_vector(x)
    if a.shape != (model.input_width,):
        raise ValueError(f"input width {a.shape} does not match model {model.input_width}")
    inputs = []
    for layer in model.layers:
        inputs.append(a)
        a = _activate(layer.activation, a @ layer.weights + layer.bias)
    y = float(a[0])
    return y, LayerTrace(inputs=inputs, output=y)


def mlp_forward_batch(model: MlpModel, X: np.ndarray) -> tuple:
    """Batched forward; returns (Y (B,), list of per-layer input batches)."""
    a = np.asarray(X, dtype=np.float64)
    inputs = []
    for layer in model.layers:
        inputs.append(a)
        a = _activate(layer.activation, a @ layer.weights + layer.bias)
    return a[:, 0], inputs


def _as_grid(g) -> np.ndarray:
    if isinstance(g, PaddedGrid):
        return g.values
    return np.asarray(g, dtype=np.float64)


def conv_patches(x: np.ndarray, kernel_size: int, stride: int) -> np.ndarray:
    """(nH, nW, k, k, c_in) view of all receptive fields."""
    windows = sliding_window_view(x, (kernel_size, kernel_size), axis=(0, 1))
    return windows[::stride, ::stride].transpose(0, 1, 3, 4, 2)


def conv_stage_forward(stage: ConvStage, x: np.ndarray) -> np.ndarray:
    patches = conv_patches(x, stage.kernel.shape[0], stage.stride)
    z = np.einsum("hwijc,ijco->hwo", patches, stage.kernel) + stage.bias
    return _activate(stage.activation, z)


def conv_forward(model: ConvModel, grid) -> tuple:
    """Run conv stages + dense head on one padded grid; returns (Y, ConvTrace)."""
    x = _as_grid(grid)
    if x.shape != (model.input_height, model.input_width):
        raise ValueError(
            f"grid {x.shape} does not tile for model input "
            f"{(model.input_height, model.input_width)}"
        )
    x = x[:, :, None]
    stage_inputs = []
    for stage in model.stages:
        stage_inputs.append(x)
        x = conv_stage_forward(stage, x)
    feature_shape = x.shape
    a = x.ravel()
    head_inputs = []
    for layer in model.head:
        head_inputs.append(a)
        a = _activate(layer.activation, a @ layer.weights + layer.bias)
    y = float(a[0])
    return y, ConvTrace(
        stage_inputs=stage_inputs,
        feature_shape=feature_shape,
        head=LayerTrace(inputs=head_inputs, output=y),
    )


def esn_forward(model: EsnModel, seq: InputSequence) -> tuple:
    """Unroll the leaky reservoir over a sequence; returns (Y, StateTrace)."""
    steps = seq.steps if isinstance(seq, InputSequence) else np.asarray(seq, dtype=np.float64)
    if steps.shape[1] != model.input_dim:
        raise ValueError(f"step dim {steps.shape[1]} does not match model {model.input_dim}")
    n_steps = steps.shape[0]
    n = model.reservoir_size
    a = model.leak_rate
    states = np.zeros((n_steps, n))
    acts = np.zeros((n_steps, n))
    carries = np.zeros((n_steps, n))
    # First step has no recurrence term and no reservoir bias.
    acts[0] = np.tanh(model.input_weights @ steps[0] + model.input_bias)
    states[0] = a * acts[0]
    for t in range(1, n_steps):
        pre = (
            model.input_weights @ steps[t]
            + model.input_bias
            + model.reservoir_weights @ states[t - 1]
            + model.reservoir_bias
        )
        acts[t] = np.tanh(pre)
        carries[t] = (1.0 - a) * states[t - 1]
        states[t] = carries[t] + a * acts[t]
    y = float(model.readout_weights @ states[-1] + model.readout_bias)
    return y, StateTrace(states=states, activations=acts, carries=carries, inputs=steps)


def esn_final_states(model: EsnModel, step_batch: np.ndarray) -> np.ndarray:
    """Final reservoir states for a batch of sequences (N, T, d) -> (N, n_res)."""
    n_samples, n_steps, _ = step_batch.shape
    a = model.leak_rate
    x = a * np.tanh(step_batch[:, 0] @ model.input_weights.T + model.input_bias)
    for t in range(1, n_steps):
        pre = (
            step_batch[:, t] @ model.input_weights.T
            + model.input_bias
            + x @ model.reservoir_weights.T
            + model.reservoir_bias
        )
        x = (1.0 - a) * x + a * np.tanh(pre)
    return x


def predict_class(y: float) -> int:
    """Class 1 for Y >= 0 (ties go to class 1), class 2 otherwise."""
    return 1 if y >= 0 else 2


def count_parameters(model) -> int:
    """Trainable scalars only; fixed reservoir weights do not count."""
    if isinstance(model, MlpModel):
        return sum(l.weights.size + l.bias.size for l in model.layers)
    if isinstance(model, ConvModel):
        conv = sum(s.kernel.size + s.bias.size for s in model.stages)
        return conv + sum(l.weights.size + l.bias.size for l in model.head)
    if isinstance(model, EsnModel):
        return model.readout_weights.size + 1
    raise TypeError(f"unknown model type {type(model)!r}")


# ---------------------------------------------------------------------------
# Checkpoints: npz archive (binary tensors with shape headers) plus a JSON
# metadata entry. float64 arrays round-trip bit-exact.
# ---------------------------------------------------------------------------


def save_model(model, path, extra_meta: dict | None = None) -> None:
    arrays = {}
    meta = {"format_version": CHECKPOINT_VERSION, "kind": model.kind}
    if extra_meta:
        meta["extra"] = extra_meta
    if isinstance(model, MlpModel):
        meta["activations"] = [l.activation for l in model.layers]
        for i, layer in enumerate(model.layers):
            arrays[f"layer{i}_weights"] = layer.weights
            arrays[f"layer{i}_bias"] = layer.bias
    elif isinstance(model, ConvModel):
        meta["stage_activations"] = [s.activation for s in model.stages]
        meta["stage_strides"] = [s.stride for s in model.stages]
        meta["head_activations"] = [l.activation for l in model.head]
        meta["input_height"] = model.input_height
        meta["input_width"] = model.input_width
        for i, stage in enumerate(model.stages):
            arrays[f"stage{i}_kernel"] = stage.kernel
            arrays[f"stage{i}_bias"] = stage.bias
        for i, layer in enumerate(model.head):
            arrays[f"head{i}_weights"] = layer.weights
            arrays[f"head{i}_bias"] = layer.bias
    elif isinstance(model, EsnModel):
        meta["leak_rate"] = model.leak_rate
        meta["readout_bias"] = model.readout_bias
        arrays["input_weights"] = model.input_weights
        arrays["input_bias"] = model.input_bias
        arrays["reservoir_weights"] = model.reservoir_weights
        arrays["reservoir_bias"] = model.reservoir_bias
        arrays["readout_weights"] = model.readout_weights
    else:
        raise TypeError(f"unknown model type {type(model)!r}")
    arrays["meta_json"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    np.savez(path, **arrays)


def load_model(path):
    """Inverse of save_model; returns (model, extra_meta)."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta_json"]).decode("utf-8"))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        kind = meta["kind"]
        if kind == "mlp":
            layers = [
                DenseLayer(
                    weights=data[f"layer{i}_weights"],
                    bias=data[f"layer{i}_bias"],
                    activation=act,
                )
                for i, act in enumerate(meta["activations"])
            ]
            model = MlpModel(layers=layers)
        elif kind == "cnn":
            stages = [
                ConvStage(
                    kernel=data[f"stage{i}_kernel"],
                    bias=data[f"stage{i}_bias"],
                    stride=stride,
                    activation=act,
                )
                for i, (act, stride) in enumerate(
                    zip(meta["stage_activations"], meta["stage_strides"])
                )
            ]
            head = [
                DenseLayer(
                    weights=data[f"head{i}_weights"],
                    bias=data[f"head{i}_bias"],
                    activation=act,
                )
                for i, act in enumerate(meta["head_activations"])
            ]
            model = ConvModel(
                stages=stages,
                head=head,
                input_height=meta["input_height"],
                input_width=meta["input_width"],
            )
        elif kind == "esn":
            model = EsnModel(
                input_weights=data["input_weights"],
                input_bias=data["input_bias"],
                reservoir_weights=data["reservoir_weights"],
                reservoir_bias=data["reservoir_bias"],
                leak_rate=meta["leak_rate"],
                readout_weights=data["readout_weights"],
                readout_bias=meta["readout_bias"],
            )
        else:
            raise ValueError(f"unknown model kind {kind!r}")
    return model, meta.get("extra")
