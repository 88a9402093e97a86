"""Training and evaluation with the analog core in the forward path.

Three backends share one topology and one set of float master weights:

``float``
    plain float32/64 matmuls, the software reference;
``quantized``
    the integer pipeline of an ideal chip: 5-bit inputs, per-matrix 6-bit
    weights, per-tile rounding and 8-bit clamping, digital recombination;
``simulator``
    every tile runs through :func:`execute_batch` on an :class:`AnalogCore`.

Gradients always follow the linearity assumption: standard backprop on the
recorded (measured) activations, with the ReLU derivative taken from the
measured pre-activations and weights used as straight-through estimates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .compiler import (Conv2D, ModelSpec, PartitionPlan, QuantizedLayer, combine_partials, im2col,
                       plan_model, quantize_inputs, quantize_weights, write_quantized_model)
from .core import INPUT_MAX, WEIGHT_MAX, AnalogCore, PhysicsSpec
from .data import Dataset
from .errors import ContractViolation, IngestionError
from .mac import ADC_RANGE, MacOptions, digitize, execute_batch

BACKENDS = ("float", "quantized", "simulator")
WEIGHTS_FORMAT = "analog-vmm-weights"
WEIGHTS_VERSION = 1


@dataclass(frozen=True)
class Hyperparameters:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 200
    batches_per_epoch: int = 300


class Adam:
    """Adam with bias correction, updating a list of arrays in place."""

    def __init__(self, shapes, hyper: Hyperparameters | None = None):
        self.hyper = hyper or Hyperparameters()
        self.m = [np.zeros(s) for s in shapes]
        self.v = [np.zeros(s) for s in shapes]
        self.t = 0

    def step(self, params, grads) -> None:
        h = self.hyper
        self.t += 1
        c1 = 1.0 - h.beta1 ** self.t
        c2 = 1.0 - h.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= h.beta1
            m += (1.0 - h.beta1) * g
            v *= h.beta2
            v += (1.0 - h.beta2) * g * g
            p -= h.lr * (m / c1) / (np.sqrt(v / c2) + h.eps)


@dataclass
class Deployment:
    """Everything fixed when a model is mapped onto the chip."""

    plans: list[PartitionPlan]
    input_scales: list[float]
    resends: list[int]
    weight_limit: int = WEIGHT_MAX
    gains: list[float] | None = None
    wait_ns: float = 8.0
    skip_zeros: bool = True

    def modes(self, spec: ModelSpec) -> list[str]:
        return [tile_mode(layer, plan) for layer, plan in zip(spec.layers, self.plans)]


def tile_mode(layer, plan: PartitionPlan) -> str:
    """ReLU readout only where one tile sees the full dot product."""
    return "relu" if layer.activation == "relu" and plan.n_row_tiles == 1 else "signed"


@dataclass
class LayerRecord:
    """One layer of a recorded forward pass.

    ``inputs`` are the presented inputs in model units (after input
    quantization on the integer backends); ``pre`` are the (dequantized,
    measured) pre-activations; ``lsb`` the recombined ADC values.
    """

    inputs: np.ndarray
    pre: np.ndarray
    lsb: np.ndarray | None = None
    codes: np.ndarray | None = None


@dataclass
class ForwardResult:
    logits: np.ndarray
    layers: list[LayerRecord]
    backend: str


@dataclass
class TrainState:
    spec: ModelSpec
    weights: list[np.ndarray]
    optimizer: Adam
    hyper: Hyperparameters = field(default_factory=Hyperparameters)
    backend: str = "float"
    deployment: Deployment | None = None
    core: AnalogCore | None = None
    seed: int = 0
    epoch: int = 0

    @property
    def step(self) -> int:
        return self.optimizer.t


def init_state(spec: ModelSpec, seed: int = 0, hyper: Hyperparameters | None = None) -> TrainState:
    """Glorot-uniform master weights, no biases."""
    hyper = hyper or Hyperparameters()
    rng = np.random.default_rng(seed)
    weights = []
    for rows, cols in spec.matmul_shapes():
        limit = math.sqrt(6.0 / (rows + cols))
        weights.append(rng.uniform(-limit, limit, size=(rows, cols)))
    return TrainState(spec, weights, Adam([w.shape for w in weights], hyper), hyper, seed=seed)


# --- forward ------------------------------------------------------------------------

def model_input(spec: ModelSpec, images) -> np.ndarray:
    """Scale uint8 images to [0, 1] and lay them out for the first layer."""
    x = np.asarray(images, dtype=float) / 255.0
    first = spec.layers[0]
    if isinstance(first, Conv2D):
        return im2col(x.reshape(len(x), *spec.input_shape), first)
    return x.reshape(len(x), -1)


def _activate(layer, pre):
    return np.maximum(pre, 0.0) if layer.activation == "relu" else pre


def _next_input(act: np.ndarray) -> np.ndarray:
    return act.reshape(len(act), -1)


def _tile_inputs(codes: np.ndarray, tile) -> np.ndarray:
    x = codes[:, tile.patch] if tile.patch is not None else codes
    return x[:, tile.row_start:tile.row_stop]


def nominal_gain(physics, resends: int) -> float:
    """LSB per unit integer dot product on an ideal chip."""
    return physics.charge_to_lsb * resends


def _layer_gain(state: TrainState, index: int, backend: str) -> float:
    dep = state.deployment
    if backend == "simulator" and dep.gains is not None:
        return dep.gains[index]
    physics = state.core.physics if state.core is not None else None
    return nominal_gain(physics or _default_physics(), dep.resends[index])


def _default_physics() -> PhysicsSpec:
    return PhysicsSpec()


def _run_tiles(state: TrainState, index: int, codes: np.ndarray, qweights: np.ndarray, mode: str,
               backend: str, collect: list | None = None) -> np.ndarray:
    dep = state.deployment
    plan = dep.plans[index]
    k = dep.resends[index]
    physics = state.core.physics if state.core is not None else _default_physics()
    partials = []
    for tile in plan.tiles:
        x = _tile_inputs(codes, tile)
        w = qweights[tile.row_start:tile.row_stop, tile.col_start:tile.col_stop]
        if backend == "quantized":
            partials.append(digitize((x @ w) * (k * physics.charge_to_lsb), mode))
            continue
        placement = tile.placement(state.core.geometry)
        state.core.load_matrix(w, placement)
        opts = MacOptions(wait_ns=dep.wait_ns, resends=k, skip_zeros=dep.skip_zeros, mode=mode)
        measured = execute_batch(state.core, placement, x, opts).values
        partials.append(measured)
        if collect is not None:
            collect.append((x @ w, measured, mode))
    return combine_partials(partials, plan, [mode] * len(partials))


def forward(state: TrainState, images, backend: str | None = None, collect: dict | None = None) -> ForwardResult:
    """Run a batch of uint8 images and record every layer.

    ``collect`` (simulator only) receives ``{layer: [(ideal_dot, measured, mode), ...]}``
    for the gain fit.
    """
    backend = backend or state.backend
    if backend not in BACKENDS:
        raise ContractViolation(f"backend must be one of {BACKENDS}")
    if backend != "float" and state.deployment is None:
        raise ContractViolation(f"the {backend} backend needs a compiled model; call compile_model first")
    if backend == "simulator" and state.core is None:
        raise ContractViolation("the simulator backend needs an AnalogCore")
    spec = state.spec
    a = model_input(spec, images)
    records = []
    dep = state.deployment
    for i, (layer, w) in enumerate(zip(spec.layers, state.weights)):
        if backend == "float":
            pre = a @ w
            records.append(LayerRecord(a, pre))
        else:
            s_in = dep.input_scales[i]
            codes = quantize_inputs(a, s_in)
            qm = quantize_weights(w, dep.weight_limit)
            mode = tile_mode(layer, dep.plans[i])
            sink = collect.setdefault(i, []) if collect is not None else None
            lsb = _run_tiles(state, i, codes, qm.weights, mode, backend, sink)
            gain = _layer_gain(state, i, backend)
            pre = lsb * (s_in * qm.scale / gain)
            records.append(LayerRecord(codes * s_in, pre, lsb, codes))
        a = _next_input(_activate(layer, pre))
    return ForwardResult(records[-1].pre, records, backend)


# --- backward -----------------------------------------------------------------------

def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(logits, labels) -> float:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    return float(-logp[np.arange(len(labels)), labels].mean())


def backward_itl(result: ForwardResult | None, weights, labels) -> tuple[list[np.ndarray], float]:
    """Gradients of the mean cross-entropy w.r.t. every master weight matrix.

    The ReLU gate is ``measured pre-activation > 0``; Jacobians use the master
    weights (the per-layer gain is already folded into the dequantized records).
    """
    if result is None or not result.layers or any(r is None or r.inputs is None or r.pre is None
                                                  for r in result.layers):
        raise ContractViolation("backward_itl needs the measured activations of a recorded forward pass")
    if len(result.layers) != len(weights):
        raise ContractViolation("one recorded layer per weight matrix required")
    labels = np.asarray(labels)
    n = len(labels)
    p = softmax(result.logits)
    loss = cross_entropy(result.logits, labels)
    dz = p
    dz[np.arange(n), labels] -= 1.0
    dz /= n
    grads: list[np.ndarray] = [None] * len(weights)
    for i in range(len(weights) - 1, -1, -1):
        rec = result.layers[i]
        if rec.inputs.ndim == 3:
            grads[i] = np.einsum("bpr,bpc->rc", rec.inputs, dz)
        else:
            grads[i] = rec.inputs.T @ dz
        if i == 0:
            break
        below = result.layers[i - 1].pre
        dh = (dz @ weights[i].T).reshape(below.shape)
        dz = dh * (below > 0)
    return grads, loss


# --- compilation --------------------------------------------------------------------

def compile_model(state: TrainState, images, core: AnalogCore | None = None, weight_limit: int = WEIGHT_MAX,
                  target_lsb: float = 127.0, percentile: float = 99.9, max_resends: int = 32,
                  input_percentile: float = 100.0, wait_ns: float = 8.0,
                  resends: list[int] | None = None) -> Deployment:
    """Choose input scales and resends for every layer from a calibration sample.

    Input scales map the largest (or ``input_percentile``) activation to code 31.
    Resends, unless given, are the largest count that keeps the ``percentile``
    tile output of an ideal chip at or below ``target_lsb`` (default: signed
    full scale).
    """
    spec = state.spec
    if resends is not None and len(resends) != len(spec.layers):
        raise ContractViolation("one resend count per layer required")
    if core is not None:
        state.core = core
    physics = core.physics if core is not None else _default_physics()
    dep = Deployment(plan_model(spec, core.geometry if core is not None else None), [], [], weight_limit,
                     wait_ns=wait_ns)
    state.deployment = dep
    a_float = a_quant = model_input(spec, images)
    for i, (layer, w) in enumerate(zip(spec.layers, state.weights)):
        if i == 0:
            s = 1.0 / INPUT_MAX
        else:
            peak = np.percentile(a_float, input_percentile) if input_percentile < 100 else a_float.max()
            s = float(peak) / INPUT_MAX if peak > 0 else 1.0
        dep.input_scales.append(s)
        codes = quantize_inputs(a_quant, s)
        qm = quantize_weights(w, weight_limit)
        if resends is None:
            dots = np.concatenate([np.abs(_tile_inputs(codes, t) @ qm.weights[t.row_start:t.row_stop,
                                                                             t.col_start:t.col_stop]).ravel()
                                   for t in dep.plans[i].tiles])
            q = np.percentile(dots, percentile)
            k = math.floor(target_lsb / (physics.charge_to_lsb * q)) if q > 0 else max_resends
            dep.resends.append(int(np.clip(k, 1, max_resends)))
        else:
            dep.resends.append(int(resends[i]))
        lsb = _run_tiles(state, i, codes, qm.weights, tile_mode(layer, dep.plans[i]), "quantized")
        pre_q = lsb * (s * qm.scale / nominal_gain(physics, dep.resends[i]))
        a_float = _next_input(_activate(layer, a_float @ w))
        a_quant = _next_input(_activate(layer, pre_q))
    return dep


def fit_hardware_gains(state: TrainState, images, clip_margin: int = 2) -> list[float]:
    """Least-squares gain per layer between measured tile outputs and ideal integer dots.

    Reads within ``clip_margin`` LSB of either ADC rail are excluded.
    """
    if state.deployment is None or state.core is None:
        raise ContractViolation("compile the model onto a core before fitting gains")
    state.deployment.gains = None
    collect: dict = {}
    forward(state, images, "simulator", collect)
    gains = []
    for i in range(len(state.weights)):
        num = den = 0.0
        for dot, measured, mode in collect[i]:
            lo, hi = ADC_RANGE[mode]
            ok = (measured > lo + clip_margin) & (measured < hi - clip_margin)
            num += float((dot[ok] * measured[ok]).sum())
            den += float((dot[ok] ** 2).sum())
        k = state.deployment.resends[i]
        gains.append(num / den if den > 0 else nominal_gain(state.core.physics, k))
    state.deployment.gains = gains
    return gains


# --- training loop ------------------------------------------------------------------

@dataclass
class EpochMetrics:
    loss: list[float]
    accuracy: list[float]

    def to_csv(self, path, start: int = 0) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch", "loss", "accuracy"])
            for i, (l, a) in enumerate(zip(self.loss, self.accuracy)):
                w.writerow([start + i, repr(l), repr(a)])


def train_step(state: TrainState, images, labels) -> tuple[float, float]:
    result = forward(state, images)
    grads, loss = backward_itl(result, state.weights, labels)
    state.optimizer.step(state.weights, grads)
    acc = float((result.logits.argmax(axis=1) == np.asarray(labels)).mean())
    return loss, acc


def train_epoch(state: TrainState, dataset: Dataset, batches: int | None = None) -> EpochMetrics:
    """One epoch of Adam updates on a seeded permutation of ``dataset``."""
    h = state.hyper
    batches = h.batches_per_epoch if batches is None else batches
    if batches * h.batch_size > len(dataset):
        raise ContractViolation(f"{batches} batches of {h.batch_size} exceed {len(dataset)} samples")
    order = np.random.default_rng([state.seed, state.epoch]).permutation(len(dataset))
    metrics = EpochMetrics([], [])
    for b in range(batches):
        idx = order[b * h.batch_size:(b + 1) * h.batch_size]
        loss, acc = train_step(state, dataset.images[idx], dataset.labels[idx])
        metrics.loss.append(loss)
        metrics.accuracy.append(acc)
    state.epoch += 1
    return metrics


def set_learning_rate(state: TrainState, lr: float) -> None:
    state.hyper = replace(state.hyper, lr=lr)
    state.optimizer.hyper = state.hyper


# learning rate from the given epoch on
SOFTWARE_SCHEDULE = ((0, 1e-3), (15, 3e-4), (25, 1e-4))


def train_software(state: TrainState, dataset: Dataset, epochs: int = 30, schedule=SOFTWARE_SCHEDULE,
                   callback=None) -> list[EpochMetrics]:
    """Initial training on the float backend with a stepped learning rate."""
    state.backend = "float"
    history = []
    for epoch in range(epochs):
        for start, lr in schedule:
            if epoch == start:
                set_learning_rate(state, lr)
        history.append(train_epoch(state, dataset))
        if callback is not None:
            callback(epoch, history[-1])
    return history


def prepare_hardware(state: TrainState, core: AnalogCore, images, warmup, **compile_options) -> Deployment:
    """Compile onto ``core``, fit the per-layer gains on ``warmup`` and switch to the simulator."""
    dep = compile_model(state, images, core, **compile_options)
    fit_hardware_gains(state, warmup)
    state.backend = "simulator"
    return dep


# --- evaluation ---------------------------------------------------------------------

@dataclass
class EvaluationResult:
    accuracy: float
    std: float
    accuracies: list[float]
    confusion: np.ndarray  # (10, 10) counts, rows = true label, summed over repeats

    def confusion_to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true"] + [f"pred_{i}" for i in range(self.confusion.shape[1])])
            for i, row in enumerate(self.confusion):
                w.writerow([i] + row.tolist())


def confusion_matrix(labels, predictions, n_classes: int = 10) -> np.ndarray:
    out = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(out, (np.asarray(labels), np.asarray(predictions)), 1)
    return out


def summarize(labels, prediction_runs) -> EvaluationResult:
    confusion = np.zeros((10, 10), dtype=np.int64)
    accs = []
    for pred in prediction_runs:
        confusion += confusion_matrix(labels, pred)
        accs.append(float((np.asarray(pred) == labels).mean()))
    return EvaluationResult(float(np.mean(accs)), float(np.std(accs)), accs, confusion)


def predict(state: TrainState, images, backend: str | None = None, chunk: int = 1000) -> np.ndarray:
    out = [forward(state, images[i:i + chunk], backend).logits.argmax(axis=1)
           for i in range(0, len(images), chunk)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(state: TrainState, dataset: Dataset, backend: str | None = None, repeats: int = 1) -> EvaluationResult:
    """Accuracy and confusion over ``repeats`` passes; the noise stream continues across repeats."""
    runs = [predict(state, dataset.images, backend) for _ in range(repeats)]
    return summarize(np.asarray(dataset.labels), runs)


# --- checkpoints --------------------------------------------------------------------

def save_weights(state: TrainState, path) -> None:
    """Float master weights plus model and deployment metadata, as ``.npz``."""
    meta = {"format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION, "spec": state.spec.to_dict(),
            "step": state.step, "epoch": state.epoch, "seed": state.seed, "lr": state.hyper.lr}
    dep = state.deployment
    if dep is not None:
        meta["deployment"] = {"input_scales": dep.input_scales, "resends": dep.resends,
                              "weight_limit": dep.weight_limit, "gains": dep.gains,
                              "wait_ns": dep.wait_ns, "skip_zeros": dep.skip_zeros}
    arrays = {f"w{i}": w for i, w in enumerate(state.weights)}
    arrays.update({f"m{i}": m for i, m in enumerate(state.optimizer.m)})
    arrays.update({f"v{i}": v for i, v in enumerate(state.optimizer.v)})
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_weights(path, hyper: Hyperparameters | None = None) -> TrainState:
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(str(data["meta"]))
            n = len(meta["spec"]["layers"])
            weights = [data[f"w{i}"].astype(float) for i in range(n)]
            moments = ([data[f"m{i}"] for i in range(n)], [data[f"v{i}"] for i in range(n)])
    except (OSError, KeyError, ValueError) as exc:
        raise IngestionError(f"{path}: not a weights file ({exc})", field="file") from exc
    if meta.get("format") != WEIGHTS_FORMAT:
        raise IngestionError(f"{path}: unexpected format {meta.get('format')!r}", field="format")
    if meta.get("version") != WEIGHTS_VERSION:
        raise IngestionError(f"{path}: unsupported version {meta.get('version')}", field="version")
    spec = ModelSpec.from_dict(meta["spec"])
    for w, shape in zip(weights, spec.matmul_shapes()):
        if w.shape != tuple(shape):
            raise IngestionError(f"{path}: weight shape {w.shape}, expected {shape}", field="shape")
    hyper = hyper or Hyperparameters(lr=meta.get("lr", Hyperparameters.lr))
    optimizer = Adam([w.shape for w in weights], hyper)
    optimizer.m, optimizer.v = [m.astype(float) for m in moments[0]], [v.astype(float) for v in moments[1]]
    optimizer.t = int(meta.get("step", 0))
    state = TrainState(spec, weights, optimizer, hyper, seed=meta.get("seed", 0), epoch=meta.get("epoch", 0))
    dep = meta.get("deployment")
    if dep is not None:
        state.deployment = Deployment(plan_model(spec), **dep)
    return state


def export_quantized(state: TrainState, path) -> None:
    """Write the deployed integer weights in the quantized-model binary format."""
    if state.deployment is None:
        raise ContractViolation("compile the model before exporting")
    dep = state.deployment
    physics = state.core.physics if state.core is not None else _default_physics()
    layers = []
    for i, w in enumerate(state.weights):
        gain = dep.gains[i] if dep.gains is not None else nominal_gain(physics, dep.resends[i])
        layers.append(QuantizedLayer(quantize_weights(w, dep.weight_limit), dep.input_scales[i], gain))
    write_quantized_model(path, layers)
