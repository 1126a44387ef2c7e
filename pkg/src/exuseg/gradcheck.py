"""Central finite-difference verification of hand-written gradients.

Two tiers: standalone layer checks run exhaustive finite differences on
small shapes (tolerance 1e-6), and the end-to-end check differentiates
the training loss of a full model against sampled parameter coordinates
(tolerance 1e-4). Both require float64; truncation plus roundoff at the
1e-5 step leaves no headroom in float32.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import layers as L
from .model import Model
from .tensor import Rng
from .training import softmax_cross_entropy

FD_STEP = 1e-5
LAYER_TOL = 1e-6
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def finite_difference(f, arr, indices, step: float = FD_STEP) -> np.ndarray:
    """Central-difference df/d(arr.flat[i]) for each flat index, in place."""
    flat = arr.reshape(-1)
    out = np.empty(len(indices), dtype=np.float64)
    for k, i in enumerate(indices):
        orig = flat[i]
        flat[i] = orig + step
        f_plus = f()
        flat[i] = orig - step
        f_minus = f()
        flat[i] = orig
        out[k] = (f_plus - f_minus) / (2.0 * step)
    return out


def rel_error(analytic, numeric) -> float:
    """max |a - n| scaled by the larger magnitude present.

    The scale floor of 1e-2 turns the comparison into the usual
    rtol-plus-atol form: directions along which the loss is exactly
    invariant (a conv bias feeding batch-norm, for example) leave both
    sides at roundoff noise, and noise / noise must not read as failure.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-2)
    return float(np.abs(a - n).max(initial=0.0) / scale)


def _check_one_layer(layer, x, rng: Rng, step: float):
    """Exhaustive FD on a standalone layer against J = sum(G * forward(x))."""
    draw = rng.split("upstream")
    base = rng.split("forward")

    def forward():
        return layer.forward(x, training=True, rng=base.clone())

    g_up = draw.normal(forward().shape)

    def objective():
        return float((g_up * forward()).sum())

    layer.forward(x, training=True, rng=base.clone())
    grad_x = layer.backward(np.asarray(g_up))

    results = {}
    numeric_x = finite_difference(objective, x, range(x.size), step)
    results["input"] = rel_error(grad_x.ravel(), numeric_x)
    for name, param in layer.param_items():
        numeric = finite_difference(objective, param, range(param.size), step)
        results[name] = rel_error(layer.grads[name].ravel(), numeric)
    return results


def check_standalone_layers(seed: int = 7, step: float = FD_STEP):
    """FD-verify every layer kind on small shapes; returns CheckResults."""
    rng = Rng(seed)
    cases = []

    conv = L.Conv2d(2, 3)
    conv.init_params(rng.split("conv-init"))
    cases.append(("conv2d", conv, rng.split("conv-x").normal((1, 5, 5, 2))))

    bn = L.BatchNorm2d(3)
    bn.init_params(rng.split("bn-init"))
    # non-trivial affine so gamma gradients are exercised
    bn.gamma[...] = rng.split("bn-gamma").uniform(3, 0.5, 1.5)
    bn.beta[...] = rng.split("bn-beta").normal(3)
    cases.append(("batchnorm2d", bn, rng.split("bn-x").normal((2, 4, 4, 3))))

    relu = L.ReLU()
    x = rng.split("relu-x").normal((2, 3, 3, 2))
    x += 0.2 * np.sign(x)  # keep clear of the kink at 0
    cases.append(("relu", relu, x))

    pool = L.MaxPool2d()
    cases.append(("maxpool2d", pool, rng.split("pool-x").normal((1, 4, 4, 2))))

    drop = L.Dropout(0.4)
    cases.append(("dropout", drop, rng.split("drop-x").normal((2, 4, 4, 2))))

    flat = L.Flatten()
    cases.append(("flatten", flat, rng.split("flat-x").normal((2, 2, 2, 3))))

    dense = L.Dense(10, 2)
    dense.init_params(rng.split("dense-init"))
    cases.append(("dense", dense, rng.split("dense-x").normal((3, 10))))

    results = []
    for label, layer, x in cases:
        errors = _check_one_layer(layer, np.asarray(x, dtype=np.float64),
                                  rng.split(f"check-{label}"), step)
        for part, err in errors.items():
            results.append(CheckResult(f"{label}.{part}", err, LAYER_TOL))
    return results


def _measured_error(loss_fn, param, analytic_flat, idx, step,
                    max_halvings: int = 5) -> float:
    """Worst validated FD-vs-analytic error over the chosen coordinates.

    Each FD estimate is validated by re-measuring at half the step: when
    the two disagree beyond half the tolerance, the objective is not
    smooth at that scale for that coordinate (a ReLU kink or pool-argmax
    flip sits inside the stencil) and FD is not a usable derivative
    there. Such coordinates cascade to smaller steps until the estimate
    stabilizes; the final level's estimate is used either way.
    """
    idx = np.asarray(idx)
    a = analytic_flat[idx]
    worst = 0.0
    remaining = np.arange(len(idx))
    h = step
    for level in range(max_halvings):
        numeric = finite_difference(loss_fn, param, idx[remaining], h)
        numeric_half = finite_difference(loss_fn, param, idx[remaining], h / 2)
        scale = np.maximum(
            np.maximum(np.abs(a[remaining]), np.abs(numeric_half)), 1e-2
        )
        wobble = np.abs(numeric - numeric_half) / scale
        err = np.abs(a[remaining] - numeric_half) / scale
        stable = wobble <= 0.5 * MODEL_TOL
        last = level == max_halvings - 1
        counted = err[stable] if not last else err
        if counted.size:
            worst = max(worst, float(counted.max()))
        remaining = remaining[~stable]
        if remaining.size == 0:
            break
        h /= 2
    return worst


def check_model_gradients(model: Model, rng: Rng, batch: int = 4,
                          coords_per_tensor: int = 10, step: float = FD_STEP):
    """FD-verify the training-loss gradient of every parameterized layer.

    Samples ``coords_per_tensor`` coordinates per parameter tensor
    (exhaustive when the tensor is smaller) and reports the worst
    relative error per layer. Dropout masks and batch statistics are
    identical across evaluations because the forward Rng is cloned.
    """
    if model.dtype != np.float64:
        raise ValueError("gradient checking requires a float64 model")
    h, w, c = model.config.input_shape
    x = rng.split("batch").uniform((batch, h, w, c))
    label_idx = rng.split("labels").integers(model.config.num_classes, batch)
    labels = np.eye(model.config.num_classes)[label_idx]
    forward_rng = rng.split("forward")

    def loss_fn():
        logits = model.forward(x, training=True, rng=forward_rng.clone())
        loss, _ = softmax_cross_entropy(logits, labels)
        return float(loss)

    logits = model.forward(x, training=True, rng=forward_rng.clone())
    loss, grad_logits = softmax_cross_entropy(logits, labels)
    model.backward(grad_logits)
    analytic = dict(model.grad_items())

    coord_rng = rng.split("coords")
    per_layer: dict[str, float] = {}
    for name, param in model.param_items():
        if param.size <= coords_per_tensor:
            idx = np.arange(param.size)
        else:
            idx = coord_rng.split(name).choice(param.size, coords_per_tensor,
                                               replace=False)
        err = _measured_error(loss_fn, param, analytic[name].ravel(), idx, step)
        layer_label = name.rsplit(".", 1)[0]  # layerNN.kind
        per_layer[layer_label] = max(per_layer.get(layer_label, 0.0), err)

    results = [CheckResult(label, err, MODEL_TOL)
               for label, err in per_layer.items()]
    return float(loss), results
