"""Training: gradient descent with L1 weight decay for the feedforward
models, closed-form ridge regression for the reservoir readout.

The feedforward loss is mean squared error plus ``l1_coeff * sum(|w|)``
over weight matrices (biases are not penalized). The subgradient of |w|
at 0 is taken as 0. Everything is seeded and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models as M
from .datagen import GridDataset
from .preprocess import FeedStrategy, pad_for_conv, flatten_valid


class TrainingError(RuntimeError):
    """Training diverged or was misconfigured."""


class NumericalError(RuntimeError):
    """A linear solve failed; usually means the ridge penalty is too small."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 500
    batch_size: int = 32
    l1_coeff: float = 0.0
    seed: int = 0
    optimizer: str = "adam"  # 'adam' | 'sgd'

    def validate(self):
        if self.learning_rate <= 0:
            raise TrainingError("learning_rate must be > 0")
        if self.epochs < 1:
            raise TrainingError("epochs must be >= 1")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.l1_coeff < 0:
            raise TrainingError("l1_coeff must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")

    def to_kv(self, prefix="train"):
        return {
            f"{prefix}.learning_rate": self.learning_rate,
            f"{prefix}.epochs": self.epochs,
            f"{prefix}.batch_size": self.batch_size,
            f"{prefix}.l1_coeff": self.l1_coeff,
            f"{prefix}.seed": self.seed,
            f"{prefix}.optimizer": self.optimizer,
        }


@dataclass
class Metrics:
    mse_train: float
    mse_val: float
    accuracy_train: float
    accuracy_val: float

    def to_kv(self, prefix="metrics"):
        return {
            f"{prefix}.mse_train": self.mse_train,
            f"{prefix}.mse_val": self.mse_val,
            f"{prefix}.accuracy_train": self.accuracy_train,
            f"{prefix}.accuracy_val": self.accuracy_val,
        }


# ---------------------------------------------------------------------------
# Parameter access: a flat list of arrays per model, with a parallel flag
# marking which entries the L1 penalty applies to.
# ---------------------------------------------------------------------------


def _params(model):
    if isinstance(model, M.MlpModel):
        arrays, penalized = [], []
        for layer in model.layers:
            arrays += [layer.weights, layer.bias]
            penalized += [True, False]
        return arrays, penalized
    if isinstance(model, M.ConvModel):
        arrays, penalized = [], []
        for stage in model.stages:
            arrays += [stage.kernel, stage.bias]
            penalized += [True, False]
        for layer in model.head:
            arrays += [layer.weights, layer.bias]
            penalized += [True, False]
        return arrays, penalized
    raise TypeError(f"gradient training only applies to MLP/CNN, got {type(model)!r}")


def l1_penalty(model) -> float:
    arrays, penalized = _params(model)
    return float(sum(np.abs(a).sum() for a, p in zip(arrays, penalized) if p))


def prepare_inputs(model, dataset: GridDataset):
    """Dataset -> (stacked model inputs, targets) for the model's layout."""
    y = dataset.targets()
    if isinstance(model, M.MlpModel):
        X = np.stack([flatten_valid(s).values for s in dataset])
        return X, y
    if isinstance(model, M.ConvModel):
        G = np.stack(
            [pad_for_conv(s, model.kernel_size, model.stride).values for s in dataset]
        )
        return G, y
    raise TypeError(f"no feedforward input layout for {type(model)!r}")


def _mlp_batch(model, X):
    """Forward with caches: returns (Y, per-layer input list)."""
    return M.mlp_forward_batch(model, X)


def _mlp_grads(model, X, y):
    """Batch MSE gradients for every parameter of the dense chain."""
    Y, inputs = _mlp_batch(model, X)
    batch = X.shape[0]
    mse = float(np.mean((Y - y) ** 2))
    g_post = (2.0 / batch) * (Y - y)[:, None]
    grads = [None] * (2 * len(model.layers))
    for li in reversed(range(len(model.layers))):
        layer = model.layers[li]
        post = inputs[li + 1] if li + 1 < len(model.layers) else Y[:, None]
        dz = g_post * M.activation_grad(layer.activation, post)
        grads[2 * li] = inputs[li].T @ dz
        grads[2 * li + 1] = dz.sum(axis=0)
        g_post = dz @ layer.weights.T
    return mse, grads, Y


def batch_patches(x, kernel_size, stride):
    """Contiguous (B, nH, nW, k, k, c) receptive-field tensor."""
    windows = np.lib.stride_tricks.sliding_window_view(x, (kernel_size, kernel_size), axis=(1, 2))
    return np.ascontiguousarray(windows[:, ::stride, ::stride].transpose(0, 1, 2, 4, 5, 3))


def _cnn_batch(model, G, stage0_patches=None):
    """Forward with caches for the conv stages and head.

    stage0_patches lets the trainer reuse precomputed receptive fields of
    the first stage (they do not depend on the weights).
    """
    x = G[:, :, :, None] if G is not None and G.ndim == 3 else G
    stage_caches = []
    for si, stage in enumerate(model.stages):
        k, s = stage.kernel.shape[0], stage.stride
        if si == 0 and stage0_patches is not None:
            patches = stage0_patches
        else:
            patches = batch_patches(x, k, s)
        z = np.einsum("bhwijc,ijco->bhwo", patches, stage.kernel) + stage.bias
        post = np.tanh(z) if stage.activation == "tanh" else z
        stage_caches.append((patches, post))
        x = post
    flat = x.reshape(x.shape[0], -1)
    a = flat
    head_inputs = []
    for layer in model.head:
        head_inputs.append(a)
        z = a @ layer.weights + layer.bias
        a = np.tanh(z) if layer.activation == "tanh" else z
    return a[:, 0], stage_caches, head_inputs


def _cnn_grads(model, G, y, stage0_patches=None):
    Y, stage_caches, head_inputs = _cnn_batch(model, G, stage0_patches)
    batch = y.shape[0]
    mse = float(np.mean((Y - y) ** 2))
    g_post = (2.0 / batch) * (Y - y)[:, None]
    n_stage_params = 2 * len(model.stages)
    grads = [None] * (n_stage_params + 2 * len(model.head))
    for li in reversed(range(len(model.head))):
        layer = model.head[li]
        post = head_inputs[li + 1] if li + 1 < len(model.head) else Y[:, None]
        dz = g_post * M.activation_grad(layer.activation, post)
        grads[n_stage_params + 2 * li] = head_inputs[li].T @ dz
        grads[n_stage_params + 2 * li + 1] = dz.sum(axis=0)
        g_post = dz @ layer.weights.T
    d_post = g_post.reshape(stage_caches[-1][1].shape)
    for si in reversed(range(len(model.stages))):
        stage = model.stages[si]
        patches, post = stage_caches[si]
        dz = d_post * M.activation_grad(stage.activation, post)
        grads[2 * si] = np.einsum("bhwijc,bhwo->ijco", patches, dz)
        grads[2 * si + 1] = dz.sum(axis=(0, 1, 2))
        if si > 0:
            prev_post = stage_caches[si - 1][1]
            d_post = np.zeros_like(prev_post)
            contrib = np.einsum("bhwo,ijco->bhwijc", dz, stage.kernel)
            k, s = stage.kernel.shape[0], stage.stride
            n_h, n_w = dz.shape[1], dz.shape[2]
            for i in range(k):
                for j in range(k):
                    d_post[:, i : i + s * n_h : s, j : j + s * n_w : s, :] += contrib[
                        :, :, :, i, j, :
                    ]
    return mse, grads, Y


def _batch_grads(model, Xb, yb, stage0_patches=None):
    if isinstance(model, M.MlpModel):
        return _mlp_grads(model, Xb, yb)
    return _cnn_grads(model, Xb, yb, stage0_patches)


def train_feedforward(model, dataset: GridDataset, config: TrainConfig):
    """Minimize MSE + l1_coeff * sum|w| over the model's parameters.

    Returns (model, history); history rows are dicts with per-epoch mean
    batch mse, the L1 penalty, and their sum.
    """
    config.validate()
    if len(dataset) == 0:
        raise TrainingError("empty training dataset")
    X, y = prepare_inputs(model, dataset)
    params, penalized = _params(model)
    rng = np.random.default_rng(config.seed)
    if config.optimizer == "adam":
        m_state = [np.zeros_like(p) for p in params]
        v_state = [np.zeros_like(p) for p in params]
        beta1, beta2, eps = 0.9, 0.999, 1e-8
        step = 0
    history = []
    n = len(dataset)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_mse = 0.0
        n_batches = 0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            mse, grads, _ = _batch_grads(model, X[idx], y[idx])
            epoch_mse += mse
            n_batches += 1
            if config.l1_coeff > 0:
                for g, p, pen in zip(grads, params, penalized):
                    if pen:
                        g += config.l1_coeff * np.sign(p)
            if config.optimizer == "adam":
                step += 1
                for i, (p, g) in enumerate(zip(params, grads)):
                    m_state[i] = beta1 * m_state[i] + (1 - beta1) * g
                    v_state[i] = beta2 * v_state[i] + (1 - beta2) * g * g
                    m_hat = m_state[i] / (1 - beta1**step)
                    v_hat = v_state[i] / (1 - beta2**step)
                    p -= config.learning_rate * m_hat / (np.sqrt(v_hat) + eps)
            else:
                for p, g in zip(params, grads):
                    p -= config.learning_rate * g
        epoch_mse /= n_batches
        penalty = config.l1_coeff * l1_penalty(model) if config.l1_coeff > 0 else 0.0
        total = epoch_mse + penalty
        if not np.isfinite(total):
            raise TrainingError(f"non-finite loss at epoch {epoch}")
        history.append(
            {"epoch": epoch, "mse": epoch_mse, "l1_penalty": penalty, "total": total}
        )
    return model, history


def loss_history_csv(history, path) -> None:
    lines = ["epoch,mse,l1_penalty,total"]
    for row in history:
        lines.append(
            f"{row['epoch']},{row['mse']!r},{row['l1_penalty']!r},{row['total']!r}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def sequence_batch(dataset: GridDataset, strategy: FeedStrategy) -> np.ndarray:
    return np.stack([strategy.prepare(s).steps for s in dataset])


def train_esn_readout(model: M.EsnModel, dataset: GridDataset, strategy: FeedStrategy,
                      ridge_lambda: float = 1e-6) -> M.EsnModel:
    """Fit the linear readout by ridge regression on final reservoir states.

    Solves (A^T A + lambda I) w = A^T y where A is the final-state matrix
    with an appended constant column for the bias. The reservoir itself is
    untouched.
    """
    if ridge_lambda < 0:
        raise TrainingError("ridge_lambda must be >= 0")
    if len(dataset) == 0:
        raise TrainingError("empty training dataset")
    states = M.esn_final_states(model, sequence_batch(dataset, strategy))
    design = np.hstack([states, np.ones((states.shape[0], 1))])
    gram = design.T @ design + ridge_lambda * np.eye(design.shape[1])
    rhs = design.T @ dataset.targets()
    if ridge_lambda == 0 and (not np.all(np.isfinite(gram)) or
                              np.linalg.cond(gram) > 1.0 / np.finfo(float).eps):
        raise NumericalError("normal matrix is singular; use ridge_lambda > 0")
    try:
        solution = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("normal matrix is singular; use ridge_lambda > 0") from exc
    model.readout_weights = solution[:-1]
    model.readout_bias = float(solution[-1])
    return model


def predict_batch(model, dataset: GridDataset, strategy: FeedStrategy = None) -> np.ndarray:
    """Predictions for every sample of a dataset."""
    if isinstance(model, M.EsnModel):
        if strategy is None:
            raise ValueError("ESN prediction needs a feeding strategy")
        states = M.esn_final_states(model, sequence_batch(dataset, strategy))
        return states @ model.readout_weights + model.readout_bias
    X, _ = prepare_inputs(model, dataset)
    if isinstance(model, M.MlpModel):
        Y, _ = M.mlp_forward_batch(model, X)
        return Y
    Y, _, _ = _cnn_batch(model, X)
    return Y


def evaluate_split(model, dataset: GridDataset, strategy: FeedStrategy = None):
    """(mse, accuracy) on one dataset."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    y = dataset.targets()
    pred = predict_batch(model, dataset, strategy)
    mse = float(np.mean((pred - y) ** 2))
    predicted_labels = np.where(pred >= 0, 1, 2)
    accuracy = float(np.mean(predicted_labels == dataset.labels()))
    return mse, accuracy


def evaluate(model, train_ds: GridDataset, val_ds: GridDataset,
             strategy: FeedStrategy = None) -> Metrics:
    mse_train, acc_train = evaluate_split(model, train_ds, strategy)
    mse_val, acc_val = evaluate_split(model, val_ds, strategy)
    return Metrics(
        mse_train=mse_train,
        mse_val=mse_val,
        accuracy_train=acc_train,
        accuracy_val=acc_val,
    )


def gradient_check(model, sample, n_weights: int = 200, step: float = 1e-5,
                   seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    Checks up to n_weights randomly chosen parameters on a single sample
    with plain squared-error loss (no L1 term, which is not differentiable
    at zero).
    """
    ds = GridDataset(samples=[sample], split="check")
    X, y = prepare_inputs(model, ds)
    params, _ = _params(model)
    _, grads, _ = _batch_grads(model, X, y)
    rng = np.random.default_rng(seed)
    sizes = np.array([p.size for p in params])
    total = int(sizes.sum())
    chosen = rng.choice(total, size=min(n_weights, total), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    def loss():
        mse, _, _ = _batch_grads(model, X, y)
        return mse

    worst = 0.0
    for flat_idx in chosen:
        pi = int(np.searchsorted(offsets, flat_idx, side="right") - 1)
        local = flat_idx - offsets[pi]
        p = params[pi].reshape(-1)
        original = p[local]
        p[local] = original + step
        up = loss()
        p[local] = original - step
        down = loss()
        p[local] = original
        numeric = (up - down) / (2 * step)
        analytic = grads[pi].reshape(-1)[local]
        scale = max(abs(analytic), abs(numeric))
        if scale < 1e-7:
            continue  # both numerically zero
        worst = max(worst, abs(analytic - numeric) / scale)
    return worst
