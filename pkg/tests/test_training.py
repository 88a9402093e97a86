from __future__ import annotations

import gzip

import numpy as np
import pytest

from analog_vmm import training as tr
from analog_vmm.compiler import Conv2D, Dense, ModelSpec, dense_model, read_quantized_model
from analog_vmm.core import AnalogCore, PhysicsSpec, VariationSpec
from analog_vmm.data import IMAGES_MAGIC, LABELS_MAGIC, Dataset, load_mnist, load_split, write_idx
from analog_vmm.errors import ContractViolation, IngestionError

TOY = ModelSpec("toy", (1, 2, 1), (Dense(4, "relu"), Dense(3, "softmax")))
CONV_TOY = ModelSpec("conv-toy", (4, 4, 1), (Conv2D(2, (2, 2), (2, 2)), Dense(3, "softmax")))


def synthetic(n=400, seed=0):
    """Digit-like blobs: class c lights up a class-specific band of pixels."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 10, size=n).astype(np.uint8)
    images = rng.integers(0, 40, size=(n, 28, 28)).astype(np.uint8)
    for i, c in enumerate(labels):
        images[i, 2 * c + 4:2 * c + 7, 4:24] = 255
    return Dataset(images, labels, "synthetic")


def ideal_core():
    return AnalogCore.from_seed(0, VariationSpec.zero(), PhysicsSpec(ideal_mode=True))


# --- IDX ingestion ------------------------------------------------------------------

def _fixture(tmp_path, n=5, labels=None, gz=False):
    images = np.arange(n * 28 * 28, dtype=np.uint64).reshape(n, 28, 28) % 256
    labels = np.arange(n) % 10 if labels is None else np.asarray(labels)
    ip, lp = tmp_path / "img", tmp_path / "lab"
    write_idx(ip, images, IMAGES_MAGIC)
    write_idx(lp, labels, LABELS_MAGIC)
    if gz:
        for p in (ip, lp):
            p.write_bytes(gzip.compress(p.read_bytes()))
    return ip, lp, images.astype(np.uint8), labels


@pytest.mark.parametrize("gz", [False, True])
def test_idx_round_trip(tmp_path, gz):
    ip, lp, images, labels = _fixture(tmp_path, gz=gz)
    ds = load_mnist(ip, lp, "test")
    assert len(ds) == 5 and ds.images.shape == (5, 28, 28)
    assert np.array_equal(ds.images, images) and np.array_equal(ds.labels, labels)


def test_idx_wrong_magic(tmp_path):
    ip, lp, *_ = _fixture(tmp_path)
    ip.write_bytes(b"\x00\x00\x08\x01" + ip.read_bytes()[4:])
    with pytest.raises(IngestionError) as info:
        load_mnist(ip, lp)
    assert info.value.field == "magic"


def test_idx_truncated(tmp_path):
    ip, lp, *_ = _fixture(tmp_path)
    ip.write_bytes(ip.read_bytes()[:-100])
    with pytest.raises(IngestionError) as info:
        load_mnist(ip, lp)
    assert info.value.field == "count"
    ip.write_bytes(ip.read_bytes()[:6])
    with pytest.raises(IngestionError) as info:
        load_mnist(ip, lp)
    assert info.value.field == "header"


def test_idx_label_range_and_count(tmp_path):
    ip, lp, *_ = _fixture(tmp_path, labels=[1, 2, 3, 12, 0])
    with pytest.raises(IngestionError) as info:
        load_mnist(ip, lp)
    assert info.value.field == "labels"
    write_idx(lp, np.zeros(4), LABELS_MAGIC)
    with pytest.raises(IngestionError) as info:
        load_mnist(ip, lp)
    assert info.value.field == "count"


def test_missing_dataset_directory(tmp_path, monkeypatch):
    # a named directory is the only one searched, even when data/mnist exists
    with pytest.raises(IngestionError) as info:
        load_split("test", tmp_path)
    assert info.value.field == "path"
    monkeypatch.setenv("ANALOG_VMM_MNIST", str(tmp_path))
    with pytest.raises(IngestionError):
        load_split("test")


def test_mnist_sizes(mnist):
    train, test = mnist
    assert train.images.shape == (60000, 28, 28) and test.images.shape == (10000, 28, 28)
    assert set(np.unique(test.labels)) == set(range(10))


# --- forward ------------------------------------------------------------------------

def test_forward_requires_compilation():
    state = tr.init_state(dense_model())
    images = synthetic(4).images
    for backend in ("quantized", "simulator"):
        with pytest.raises(ContractViolation):
            tr.forward(state, images, backend)
    tr.compile_model(state, images)
    with pytest.raises(ContractViolation):
        tr.forward(state, images, "simulator")
    with pytest.raises(ContractViolation):
        tr.forward(state, images, "analog")


def test_all_zero_image_gives_equal_logits():
    state = tr.init_state(dense_model(), seed=3)
    data = synthetic(50)
    tr.compile_model(state, data.images, ideal_core())
    zero = np.zeros((1, 28, 28), dtype=np.uint8)
    for backend in tr.BACKENDS:
        logits = tr.forward(state, zero, backend).logits
        assert np.all(logits == logits[0, 0])


def test_ideal_simulator_equals_quantized():
    state = tr.init_state(dense_model(), seed=1)
    data = synthetic(64)
    tr.compile_model(state, data.images, ideal_core())
    sim = tr.forward(state, data.images, "simulator")
    quant = tr.forward(state, data.images, "quantized")
    assert np.array_equal(sim.logits, quant.logits)
    for a, b in zip(sim.layers, quant.layers):
        assert np.array_equal(a.lsb, b.lsb)


def test_conv_ideal_simulator_equals_quantized():
    spec = ModelSpec("conv-small", (28, 28, 1), (Conv2D(4, (10, 10), (5, 5), padding=1), Dense(10, "softmax")))
    state = tr.init_state(spec, seed=2)
    data = synthetic(16)
    tr.compile_model(state, data.images, ideal_core())
    assert np.array_equal(tr.forward(state, data.images, "simulator").logits,
                          tr.forward(state, data.images, "quantized").logits)


def test_tile_mode_selection():
    state = tr.init_state(ModelSpec("m", (28, 28, 1), (Dense(64, "relu"),)))
    tr.compile_model(state, synthetic(8).images)
    assert state.deployment.modes(state.spec) == ["signed"]
    state = tr.init_state(ModelSpec("m", (10, 10, 1), (Dense(20, "relu"), Dense(3, "softmax"))))
    tr.compile_model(state, synthetic(8).images[:, :10, :10])
    assert state.deployment.modes(state.spec) == ["relu", "signed"]


def test_gain_fit_on_ideal_chip_is_nominal():
    state = tr.init_state(dense_model(), seed=4)
    data = synthetic(100)
    tr.compile_model(state, data.images, ideal_core())
    gains = tr.fit_hardware_gains(state, data.images)
    nominal = [tr.nominal_gain(PhysicsSpec(), k) for k in state.deployment.resends]
    assert np.allclose(gains, nominal, rtol=0.02)


# --- backward -----------------------------------------------------------------------

def _loss(state, images, labels):
    return tr.cross_entropy(tr.forward(state, images, "float").logits, labels)


@pytest.mark.parametrize("spec", [TOY, CONV_TOY], ids=["dense", "conv"])
def test_gradients_match_finite_differences(spec):
    state = tr.init_state(spec, seed=5)
    rng = np.random.default_rng(6)
    n_pixels = int(np.prod(spec.input_shape))
    images = rng.uniform(20, 255, size=(8, n_pixels)).reshape(8, *spec.input_shape[:2])
    labels = rng.integers(0, 3, size=8)
    grads, loss = tr.backward_itl(tr.forward(state, images, "float"), state.weights, labels)
    assert loss == pytest.approx(_loss(state, images, labels))
    if spec is TOY:
        assert sum(w.size for w in state.weights) == 20
    eps = 1e-6
    worst = 0.0
    for w, g in zip(state.weights, grads):
        for idx in np.ndindex(w.shape):
            keep = w[idx]
            w[idx] = keep + eps
            up = _loss(state, images, labels)
            w[idx] = keep - eps
            down = _loss(state, images, labels)
            w[idx] = keep
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(numeric - g[idx]) / max(abs(numeric), abs(g[idx]), 1e-6))
    assert worst <= 1e-4


def test_relu_gate_blocks_gradient():
    state = tr.init_state(TOY, seed=0)
    images = np.full((2, 1, 2), 200.0)
    result = tr.forward(state, images, "float")
    result.layers[0].pre[:, 1] = 0.0
    grads, _ = tr.backward_itl(result, state.weights, np.array([0, 2]))
    assert np.all(grads[0][:, 1] == 0.0)
    assert np.any(grads[0][:, [0, 2, 3]] != 0.0) or np.all(result.layers[0].pre[:, [0, 2, 3]] <= 0)


def test_ideal_itl_gradient_equals_straight_through_gradient():
    state = tr.init_state(dense_model(), seed=7)
    data = synthetic(64)
    tr.compile_model(state, data.images, ideal_core())
    g_sim, _ = tr.backward_itl(tr.forward(state, data.images, "simulator"), state.weights, data.labels)
    g_q, _ = tr.backward_itl(tr.forward(state, data.images, "quantized"), state.weights, data.labels)
    for a, b in zip(g_sim, g_q):
        assert np.array_equal(a, b)


def test_backward_needs_records():
    state = tr.init_state(TOY)
    with pytest.raises(ContractViolation):
        tr.backward_itl(None, state.weights, [0])
    result = tr.forward(state, np.ones((1, 1, 2)), "float")
    result.layers[0].pre = None
    with pytest.raises(ContractViolation):
        tr.backward_itl(result, state.weights, [0])


# --- optimizer and loop -------------------------------------------------------------

def test_adam_scalar_steps():
    h = tr.Hyperparameters(lr=0.01)
    opt = tr.Adam([()], h)
    p = [np.array(1.0)]
    m = v = 0.0
    expected = 1.0
    for t, g in enumerate((0.5, -0.2), start=1):
        opt.step(p, [np.array(g)])
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        expected -= 0.01 * (m / (1 - 0.9 ** t)) / ((v / (1 - 0.999 ** t)) ** 0.5 + 1e-8)
        assert float(p[0]) == expected
    assert opt.t == 2


def test_zero_learning_rate_leaves_weights():
    state = tr.init_state(dense_model(), hyper=tr.Hyperparameters(lr=0.0, batch_size=20, batches_per_epoch=5))
    before = [w.copy() for w in state.weights]
    metrics = tr.train_epoch(state, synthetic(100))
    assert all(np.array_equal(a, b) for a, b in zip(before, state.weights))
    assert len(metrics.loss) == 5 and state.step == 5
    # same batch, same weights: the metric does not move
    again = tr.train_step(state, synthetic(100).images[:20], synthetic(100).labels[:20])
    assert again == tr.train_step(state, synthetic(100).images[:20], synthetic(100).labels[:20])


def test_training_is_deterministic():
    def run():
        state = tr.init_state(dense_model(), seed=2, hyper=tr.Hyperparameters(batch_size=50, batches_per_epoch=8))
        data = synthetic(400)
        tr.compile_model(state, data.images, AnalogCore.from_seed(3))
        state.backend = "simulator"
        state.core.reseed_noise(9)
        return tr.train_epoch(state, data), state.weights
    (m1, w1), (m2, w2) = run(), run()
    assert m1 == m2
    assert all(np.array_equal(a, b) for a, b in zip(w1, w2))


def test_training_learns_and_epoch_bounds():
    state = tr.init_state(dense_model(), hyper=tr.Hyperparameters(batch_size=50, batches_per_epoch=8))
    data = synthetic(400)
    metrics = tr.train_epoch(state, data)
    assert metrics.loss[-1] < metrics.loss[0]
    with pytest.raises(ContractViolation):
        tr.train_epoch(state, data, batches=9)
    assert tr.Hyperparameters().batch_size * tr.Hyperparameters().batches_per_epoch == 60000


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    tr.EpochMetrics([1.5, 0.5], [0.25, 0.75]).to_csv(path)
    assert path.read_text().splitlines() == ["batch,loss,accuracy", "0,1.5,0.25", "1,0.5,0.75"]


# --- evaluation ---------------------------------------------------------------------

def test_perfect_predictions_give_diagonal_confusion():
    labels = np.arange(100) % 10
    result = tr.summarize(labels, [labels])
    assert result.accuracy == 1.0 and result.std == 0.0
    assert np.array_equal(result.confusion, np.diag(np.full(10, 10)))


def test_evaluate_repeats(tmp_path):
    state = tr.init_state(dense_model())
    data = synthetic(60)
    tr.compile_model(state, data.images, AnalogCore.from_seed(1))
    result = tr.evaluate(state, data, "simulator", repeats=3)
    assert len(result.accuracies) == 3
    assert result.confusion.sum() == 180
    result.confusion_to_csv(tmp_path / "c.csv")
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0].startswith("true,pred_0") and len(lines) == 11


# --- checkpoints --------------------------------------------------------------------

def test_weights_round_trip(tmp_path):
    state = tr.init_state(dense_model(), seed=8, hyper=tr.Hyperparameters(batch_size=50, batches_per_epoch=2))
    data = synthetic(100)
    tr.train_epoch(state, data)
    tr.compile_model(state, data.images, weight_limit=15)
    path = tmp_path / "w.npz"
    tr.save_weights(state, path)
    back = tr.load_weights(path)
    assert back.spec == state.spec and back.step == state.step == 2 and back.epoch == 1
    assert all(np.array_equal(a, b) for a, b in zip(back.weights, state.weights))
    assert all(np.array_equal(a, b) for a, b in zip(back.optimizer.m, state.optimizer.m))
    assert back.deployment.resends == state.deployment.resends
    assert back.deployment.weight_limit == 15
    assert np.array_equal(tr.forward(back, data.images, "quantized").logits,
                          tr.forward(state, data.images, "quantized").logits)


def test_weights_file_errors(tmp_path):
    bad = tmp_path / "bad.npz"
    bad.write_bytes(b"not a zip")
    with pytest.raises(IngestionError):
        tr.load_weights(bad)
    np.savez(tmp_path / "other.npz", meta=np.array('{"format": "x", "version": 1, "spec": {"layers": []}}'))
    with pytest.raises(IngestionError) as info:
        tr.load_weights(tmp_path / "other.npz")
    assert info.value.field == "format"


def test_export_quantized(tmp_path):
    state = tr.init_state(dense_model())
    with pytest.raises(ContractViolation):
        tr.export_quantized(state, tmp_path / "m.avmq")
    tr.compile_model(state, synthetic(20).images)
    tr.export_quantized(state, tmp_path / "m.avmq")
    layers = read_quantized_model(tmp_path / "m.avmq")
    assert [l.matrix.weights.shape for l in layers] == [(784, 64), (64, 10)]
    assert layers[0].input_scale == pytest.approx(1 / 31)
