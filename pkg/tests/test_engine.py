"""
Tests for the graph engine: layers, gradients, optimizers, training and checkpoints.
"""
import csv

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from sdd.engine import (
    ModelGraph,
    TrainHistory,
    decode_checkpoint,
    encode_checkpoint,
    evaluate_loss,
    layer_count,
    layer_of,
    load_checkpoint,
    make_optimizer,
    optimizer_step,
    parameter_count,
    save_checkpoint,
    serialized_size,
    train,
)
from sdd.exceptions import (
    CheckpointError,
    ConfigError,
    InvalidArgumentError,
    NonFiniteGradientError,
    ShapeError,
    StateError,
)
from sdd.schemas import TrainConfig


def _node(name, kind, inputs, **params):
    return {"name": name, "kind": kind, "inputs": list(inputs), "params": params}


def _dense_ae(seed=0):
    return ModelGraph(
        {"x": (8,)},
        [_node("enc", "dense", ["x"], units=2), _node("dec", "dense", ["enc"], units=8)],
        ["dec"],
        roles={"latent": "enc"},
        seed=seed,
    )


def _mse_objective(graph, batch, acts):
    return F.mse_loss(acts["dec"], batch["x"])


def _low_rank_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    basis = rng.standard_normal((2, 8))
    return {"x": (rng.standard_normal((n, 2)) @ basis / 2.0).astype(np.float32)}


def _conv_graph(seed=0):
    return ModelGraph(
        {"x": (1, 8, 8)},
        [
            _node("conv", "conv2d", ["x"], out_channels=4),
            _node("bn", "batchnorm", ["conv"]),
            _node("act", "relu", ["bn"]),
            _node("pool", "maxpool2d", ["act"]),
            _node("up", "upsample2d", ["pool"]),
            _node("out", "conv2d", ["up"], out_channels=1),
        ],
        ["out"],
        seed=seed,
    )


# =================
# Graph construction & forward
# =================

def test_identity_graph_returns_input():
    graph = ModelGraph({"x": (3,)}, [], ["x"])
    x = torch.tensor([[1.0, -2.0, 3.0]])

    out = graph.outputs_of(graph({"x": x}))
    assert torch.equal(out["x"], x)


def test_zero_conv_gives_zero_output_with_expected_shape():
    graph = ModelGraph({"x": (2, 9, 9)}, [_node("conv", "conv2d", ["x"], out_channels=4, kernel=3, stride=2,
                                                padding=0)], ["conv"])
    with torch.no_grad():
        for p in graph.parameters():
            p.zero_()
    out = graph({"x": torch.randn(5, 2, 9, 9)})["conv"]

    assert out.shape == (5, 4, (9 - 3) // 2 + 1, (9 - 3) // 2 + 1)
    assert torch.all(out == 0)


def test_same_padding_conv_keeps_spatial_size():
    graph = ModelGraph({"x": (1, 32, 32)}, [_node("conv", "conv2d", ["x"], out_channels=2)], ["conv"])

    assert graph.shapes["conv"] == (2, 32, 32)
    assert graph({"x": torch.zeros(1, 1, 32, 32)})["conv"].shape == (1, 2, 32, 32)


def test_dense_after_image_names_the_layer():
    with pytest.raises(ShapeError) as e:
        ModelGraph({"x": (1, 4, 4)}, [_node("fc", "dense", ["x"], units=2)], ["fc"])

    assert e.value.layer == "fc"


def test_wrong_input_shape_names_the_entry():
    graph = _conv_graph()

    with pytest.raises(ShapeError) as e:
        graph({"x": torch.zeros(2, 1, 6, 6)})
    assert e.value.layer == "x"


def test_missing_input_is_rejected():
    with pytest.raises(InvalidArgumentError):
        _conv_graph()({"y": torch.zeros(1, 1, 8, 8)})


@pytest.mark.parametrize("layers,outputs", [
    ([_node("conv", "conv2d", ["x"], out_channels=2, kernel=2)], ["conv"]),
    ([_node("conv", "conv2d", ["nope"], out_channels=2)], ["conv"]),
    ([_node("conv", "conv2d", ["x"], out_channels=2), _node("conv", "relu", ["conv"])], ["conv"]),
    ([_node("pool", "maxpool2d", ["x"], mode="median")], ["pool"]),
    ([_node("conv", "conv2d", ["x"])], ["conv"]),
    ([], ["missing"]),
])
def test_invalid_graph_raises_config_error(layers, outputs):
    with pytest.raises(ConfigError):
        ModelGraph({"x": (1, 4, 4)}, layers, outputs)


def test_same_seed_gives_same_initialization():
    a, b = _conv_graph(seed=3), _conv_graph(seed=3)

    for (name, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.equal(pa, pb), name
    assert not torch.equal(next(_conv_graph(seed=4).parameters()), next(a.parameters()))


def test_graph_counts():
    graph = _dense_ae()

    assert layer_count(graph) == 2
    assert parameter_count(graph) == (8 * 2 + 2) + (2 * 8 + 8)
    assert layer_of("layers.enc.weight") == "enc"


def test_batchnorm_training_mode_normalizes_each_channel():
    graph = ModelGraph({"x": (3, 4, 4)}, [_node("bn", "batchnorm", ["x"])], ["bn"])
    graph.train()
    x = 5.0 * torch.randn(16, 3, 4, 4, generator=torch.Generator().manual_seed(0)) + 2.0

    out = graph({"x": x})["bn"]
    mean = out.mean(dim=(0, 2, 3))
    var = out.var(dim=(0, 2, 3), unbiased=False)
    assert torch.all(mean.abs() < 1e-4)
    assert torch.all((var - 1.0).abs() < 1e-3)


# =================
# Backward
# =================

def test_backward_before_forward_raises():
    with pytest.raises(StateError):
        _dense_ae().backward(torch.zeros(1, 8))


def test_backward_clears_the_recorded_pass():
    graph = _dense_ae()
    graph({"x": torch.ones(2, 8)})
    graph.backward(torch.ones(2, 8))

    with pytest.raises(StateError):
        graph.backward(torch.ones(2, 8))


def test_zero_loss_gradient_gives_zero_parameter_gradients():
    graph = _dense_ae()
    graph({"x": torch.randn(4, 8)})
    grads = graph.backward(torch.zeros(4, 8))

    assert set(grads) == {name for name, _ in graph.named_parameters()}
    assert all(torch.all(g == 0) for g in grads.values())


def test_dense_gradient_by_hand():
    graph = ModelGraph({"x": (2,)}, [_node("fc", "dense", ["x"], units=2)], ["fc"])
    with torch.no_grad():
        graph.layers["fc"].weight.copy_(torch.tensor([[1.0, 2.0], [3.0, 4.0]]))
        graph.layers["fc"].bias.zero_()

    out = graph({"x": torch.tensor([[1.0, 1.0]])})["fc"]
    grads = graph.backward(torch.tensor([[1.0, 1.0]]))
    assert torch.equal(out, torch.tensor([[3.0, 7.0]]))
    assert torch.equal(grads["layers.fc.weight"], torch.ones(2, 2))
    assert torch.equal(grads["layers.fc.bias"], torch.ones(2))


def test_backward_rejects_mismatched_gradient_shape():
    graph = _dense_ae()
    graph({"x": torch.ones(2, 8)})

    with pytest.raises(ShapeError):
        graph.backward(torch.ones(3, 8))


LAYER_CASES = {
    "conv2d": ({"x": (2, 5, 5)}, [_node("l", "conv2d", ["x"], out_channels=3, stride=2)], ["l"]),
    "maxpool2d": ({"x": (2, 4, 4)}, [_node("l", "maxpool2d", ["x"])], ["l"]),
    "meanpool2d": ({"x": (2, 4, 4)}, [_node("l", "maxpool2d", ["x"], mode="mean")], ["l"]),
    "batchnorm2d": ({"x": (3, 4, 4)}, [_node("l", "batchnorm", ["x"])], ["l"]),
    "batchnorm1d": ({"x": (5,)}, [_node("l", "batchnorm", ["x"])], ["l"]),
    "relu": ({"x": (2, 3, 3)}, [_node("l", "relu", ["x"])], ["l"]),
    "sigmoid": ({"x": (2, 3, 3)}, [_node("l", "sigmoid", ["x"])], ["l"]),
    "dense": ({"x": (4,)}, [_node("l", "dense", ["x"], units=3)], ["l"]),
    "upsample2d": ({"x": (2, 3, 3)}, [_node("l", "upsample2d", ["x"])], ["l"]),
    "concat": ({"a": (2, 3, 3), "b": (1, 3, 3)}, [_node("l", "concat", ["a", "b"])], ["l"]),
    "add": ({"a": (2, 3, 3), "b": (2, 3, 3)}, [_node("l", "add", ["a", "b"])], ["l"]),
    "attention": ({"x": (8, 3, 3)}, [_node("l", "attention", ["x"], heads=4)], ["l"]),
    "attention_pair": ({"a": (8, 2, 2), "b": (8, 3, 3)}, [_node("l", "attention", ["a", "b"], heads=2)],
                       ["l[0]", "l[1]"]),
    "bottleneck_exchange": ({"a": (4, 2, 2), "b": (4, 3, 3)},
                            [_node("l", "bottleneck_exchange", ["a", "b"], heads=2, tokens=2)], ["l[0]", "l[1]"]),
    "residual_block": ({"x": (2, 4, 4)}, [_node("l", "residual_block", ["x"], out_channels=3, stride=2)], ["l"]),
    "sampling": ({"mu": (4,), "logvar": (4,)}, [_node("l", "sampling", ["mu", "logvar"])], ["l"]),
    "flatten": ({"x": (2, 3, 3)}, [_node("l", "flatten", ["x"])], ["l"]),
    "reshape": ({"x": (12,)}, [_node("l", "reshape", ["x"], shape=[3, 2, 2])], ["l"]),
}


@pytest.mark.parametrize("seed", [0, 1, 2])
@pytest.mark.parametrize("case", sorted(LAYER_CASES))
def test_layer_gradients_match_finite_differences(fd_errors, case, seed):
    entries, layers, outputs = LAYER_CASES[case]
    graph = ModelGraph(entries, layers, outputs, seed=seed).double()
    graph.train()
    gen = torch.Generator().manual_seed(seed)
    inputs = {
        name: torch.randn((2,) + tuple(shape), generator=gen, dtype=torch.float64).requires_grad_(True)
        for name, shape in entries.items()
    }
    weights = {ref: torch.randn((2,) + graph.shapes[ref], generator=gen, dtype=torch.float64) for ref in outputs}

    def loss_fn():
        graph.set_sampling(True, seed)
        acts = graph(inputs)
        return sum((acts[ref] * weights[ref]).sum() for ref in outputs)

    graph.set_sampling(True, seed)
    graph(inputs)
    analytic = dict(graph.backward(weights))
    analytic.update({name: x.grad for name, x in inputs.items()})
    tensors = dict(graph.named_parameters())
    tensors.update(inputs)

    errors = fd_errors(loss_fn, tensors, analytic, eps=1e-6, seed=seed, floor=1e-3)
    worst = max(e for errs in errors.values() for e in errs)
    assert worst < 1e-4, errors


def test_sampling_is_deterministic_when_noise_is_off():
    graph = ModelGraph({"mu": (3,), "logvar": (3,)}, [_node("z", "sampling", ["mu", "logvar"])], ["z"])
    graph.train()
    graph.set_sampling(False)
    mu, logvar = torch.randn(2, 3), torch.randn(2, 3)

    assert torch.equal(graph({"mu": mu, "logvar": logvar})["z"], mu)


# =================
# Optimizers
# =================

def _scalar_param(value, grad):
    p = torch.nn.Parameter(torch.tensor([value], dtype=torch.float64))
    p.grad = torch.tensor([grad], dtype=torch.float64)
    return p


def test_adam_first_step():
    p = _scalar_param(0.0, 1.0)
    make_optimizer([p], TrainConfig(optimizer="adam", learning_rate=1e-3)).step()

    assert p.item() == pytest.approx(-1e-3 / (1.0 + 1e-7), rel=1e-9)
    assert p.item() == pytest.approx(-9.999999e-4, rel=1e-6)


def test_sgd_step():
    p = _scalar_param(1.0, 2.0)
    make_optimizer([p], TrainConfig(optimizer="sgd", learning_rate=0.1)).step()

    assert p.item() == pytest.approx(0.8, abs=1e-12)


@pytest.mark.parametrize("name", ["adam", "sgd", "adadelta"])
def test_zero_gradient_leaves_parameter_unchanged(name):
    p = _scalar_param(0.5, 0.0)
    make_optimizer([p], TrainConfig(optimizer=name, learning_rate=0.1)).step()

    assert p.item() == 0.5


def test_non_finite_gradient_stops_the_step():
    graph = _dense_ae()
    optimizer = make_optimizer(graph.parameters(), TrainConfig(learning_rate=0.1))
    for p in graph.parameters():
        p.grad = torch.zeros_like(p)
    graph.layers["dec"].weight.grad[0, 0] = float("nan")
    before = graph.layers["dec"].weight.detach().clone()

    with pytest.raises(NonFiniteGradientError) as e:
        optimizer_step(optimizer, graph, step=5)
    assert (e.value.layer, e.value.step) == ("dec", 5)
    assert torch.equal(graph.layers["dec"].weight, before)


# =================
# Training
# =================

def test_zero_learning_rate_keeps_parameters():
    graph = _dense_ae(seed=2)
    before = {k: v.clone() for k, v in graph.state_dict().items()}
    data = _low_rank_data(32)

    result = train(graph, data, data, TrainConfig(learning_rate=0.0, epochs=3, batch_size=8), _mse_objective)
    assert result.history.epochs == 3
    for name, value in graph.state_dict().items():
        assert torch.equal(value, before[name]), name


def test_training_is_deterministic():
    data = _low_rank_data(32)
    config = TrainConfig(learning_rate=1e-2, epochs=3, batch_size=8, seed=5)
    a = train(_dense_ae(seed=1), data, None, config, _mse_objective)
    b = train(_dense_ae(seed=1), data, None, config, _mse_objective)

    assert a.history.train_loss == b.history.train_loss
    for name in a.state:
        assert torch.equal(a.state[name], b.state[name])


def test_training_keeps_min_validation_epoch():
    data = _low_rank_data(32)
    result = train(_dense_ae(), data, _low_rank_data(16, seed=1),
                   TrainConfig(learning_rate=1e-2, epochs=5, batch_size=8), _mse_objective)
    history = result.history

    assert history.best_loss == min(history.val_loss)
    assert history.val_loss[history.best_epoch] == history.best_loss


def test_non_finite_loss_keeps_last_finite_checkpoint():
    graph = _dense_ae()
    before = {k: v.clone() for k, v in graph.state_dict().items()}

    def broken(graph, batch, acts):
        return acts["dec"].sum() * float("nan")

    result = train(graph, _low_rank_data(16), None, TrainConfig(epochs=2, batch_size=8), broken)
    assert result.history.diverged is not None
    assert result.history.epochs == 0
    for name, value in graph.state_dict().items():
        assert torch.equal(value, before[name])


def test_train_rejects_empty_or_ragged_data():
    with pytest.raises(InvalidArgumentError):
        train(_dense_ae(), {"x": np.zeros((0, 8))}, None, TrainConfig(epochs=1), _mse_objective)
    with pytest.raises(InvalidArgumentError):
        train(_dense_ae(), {"x": np.zeros((4, 8)), "y": np.zeros((3, 8))}, None, TrainConfig(epochs=1),
              _mse_objective)


@pytest.mark.slow
def test_linear_autoencoder_converges():
    data = _low_rank_data(64)
    graph = _dense_ae(seed=0)

    train(graph, data, data, TrainConfig(learning_rate=5e-3, epochs=400, batch_size=64), _mse_objective)
    assert evaluate_loss(graph, data, _mse_objective) < 1e-3


def test_history_csv(tmp_path):
    history = TrainHistory(train_loss=[1.0, 0.5], val_loss=[None, 0.25], best_epoch=1, best_loss=0.25)
    path = tmp_path / "history.csv"
    history.to_csv(path)

    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    assert rows[0] == ["epoch", "train_loss", "val_loss", "best"]
    assert rows[1] == ["0", "1.0", "", "0"]
    assert rows[2] == ["1", "0.5", "0.25", "1"]


# =================
# Checkpoints
# =================

def test_checkpoint_round_trip_is_bit_identical():
    graph = _conv_graph(seed=7)
    graph.train()
    graph({"x": torch.randn(4, 1, 8, 8)})  # moves batchnorm running stats
    graph.eval()
    payload = encode_checkpoint(graph, {"model_id": "test"})

    restored, metadata = decode_checkpoint(payload)
    assert metadata == {"model_id": "test"}
    assert encode_checkpoint(restored, {"model_id": "test"}) == payload
    x = torch.randn(2, 1, 8, 8)
    with torch.no_grad():
        assert torch.equal(graph({"x": x})["out"], restored({"x": x})["out"])


def test_checkpoint_file_round_trip(tmp_path):
    graph = _dense_ae(seed=3)
    path = tmp_path / "model.sddckpt"

    size = save_checkpoint(graph, path)
    restored, _ = load_checkpoint(path)
    assert size == path.stat().st_size == serialized_size(graph)
    assert restored.roles == {"latent": "enc"}
    assert torch.equal(restored.layers["enc"].weight, graph.layers["enc"].weight)


@pytest.mark.parametrize("corrupt", [
    lambda b: b"NOTACKPT" + b[8:],
    lambda b: b[:-3],
    lambda b: b + b"\x00\x00\x00\x00",
    lambda b: b[:12],
])
def test_corrupt_checkpoint_is_rejected(corrupt):
    payload = encode_checkpoint(_dense_ae())

    with pytest.raises(CheckpointError):
        decode_checkpoint(corrupt(payload))


def test_missing_checkpoint_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "absent.sddckpt")
