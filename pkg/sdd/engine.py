"""
Graph-structured neural-network engine on top of torch.

A ModelGraph is built from a list of LayerSpec nodes (kind, hyperparameters and
input references). It keeps every activation of the last forward pass, exposes
parameter gradients through `backward`, trains with a min-validation-loss
checkpoint policy and serializes to the SDDCKPT1 checkpoint format.
"""
import csv
import io
import json
import logging
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from sdd.exceptions import (
    CheckpointError,
    ConfigError,
    InvalidArgumentError,
    NonFiniteGradientError,
    ShapeError,
    StateError,
)
from sdd.schemas import LayerSpec, TrainConfig, canonical_json

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]
Objective = Callable[["ModelGraph", Dict[str, torch.Tensor], Dict[str, torch.Tensor]], torch.Tensor]

CHECKPOINT_MAGIC = b"SDDCKPT1"
CHECKPOINT_VERSION = 1

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-7
ADADELTA_RHO = 0.95
ADADELTA_EPS = 1e-6
BN_MOMENTUM = 0.1  # torch convention: running = 0.9 * running + 0.1 * batch
BN_EPS = 1e-5

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_REF_RE = re.compile(r"^(?P<name>[A-Za-z_][A-Za-z0-9_]*)(\[(?P<index>\d+)\])?$")

SINGLE_INPUT_KINDS = {"conv2d", "maxpool2d", "batchnorm", "relu", "sigmoid", "dense", "upsample2d",
                      "residual_block", "flatten", "reshape"}


# =============================================================================
# LAYERS
# =============================================================================

def _kaiming(module: nn.Module) -> nn.Module:
    nn.init.kaiming_uniform_(module.weight, nonlinearity="relu")
    if module.bias is not None:
        nn.init.zeros_(module.bias)
    return module


def _tokens(x: torch.Tensor) -> torch.Tensor:
    # (N, C, H, W) -> (N, H*W, C)
    return x.flatten(2).transpose(1, 2)


def _untokens(tokens: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    return tokens.transpose(1, 2).reshape(like.shape)


class Pool2d(nn.Module):
    def __init__(self, kernel: int, stride: int, mode: str):
        super().__init__()
        self.kernel, self.stride, self.mode = kernel, stride, mode

    def forward(self, x):
        if self.mode == "mean":
            return F.avg_pool2d(x, self.kernel, self.stride)
        return F.max_pool2d(x, self.kernel, self.stride)


class Upsample2d(nn.Module):
    def __init__(self, factor: int):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return F.interpolate(x, scale_factor=self.factor, mode="nearest")


class Concat(nn.Module):
    def __init__(self, axis: int):
        super().__init__()
        self.axis = axis

    def forward(self, *xs):
        return torch.cat(xs, dim=self.axis + 1)


class Add(nn.Module):
    def forward(self, *xs):
        total = xs[0]
        for x in xs[1:]:
            total = total + x
        return total


class Flatten(nn.Module):
    def forward(self, x):
        return x.flatten(1)


class Reshape(nn.Module):
    def __init__(self, shape: Shape):
        super().__init__()
        self.shape = tuple(shape)

    def forward(self, x):
        return x.reshape((x.shape[0],) + self.shape)


class TokenAttention(nn.Module):
    """Self-attention over the spatial tokens of all inputs, with a residual connection."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.attn = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, *xs):
        tokens = [_tokens(x) for x in xs]
        seq = torch.cat(tokens, dim=1)
        attended, _ = self.attn(seq, seq, seq, need_weights=False)
        seq = seq + attended
        parts = torch.split(seq, [t.shape[1] for t in tokens], dim=1)
        out = tuple(_untokens(p, x) for p, x in zip(parts, xs))
        return out if len(out) > 1 else out[0]


class BottleneckExchange(nn.Module):
    """
    Two-modality exchange through a few shared tokens: the tokens first attend
    to both modalities, then each modality attends to the updated tokens.
    """

    def __init__(self, channels: int, heads: int, n_tokens: int):
        super().__init__()
        self.bottleneck = nn.Parameter(torch.empty(1, n_tokens, channels))
        nn.init.normal_(self.bottleneck, std=0.02)
        self.gather = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.read_a = nn.MultiheadAttention(channels, heads, batch_first=True)
        self.read_b = nn.MultiheadAttention(channels, heads, batch_first=True)

    def forward(self, a, b):
        ta, tb = _tokens(a), _tokens(b)
        shared = self.bottleneck.expand(a.shape[0], -1, -1)
        both = torch.cat([ta, tb], dim=1)
        shared = shared + self.gather(shared, both, both, need_weights=False)[0]
        ta = ta + self.read_a(ta, shared, shared, need_weights=False)[0]
        tb = tb + self.read_b(tb, shared, shared, need_weights=False)[0]
        return _untokens(ta, a), _untokens(tb, b)


class ResidualBlock(nn.Module):
    """conv-bn-relu-conv-bn plus a (projected when needed) skip, then ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int):
        super().__init__()
        self.conv1 = _kaiming(nn.Conv2d(in_channels, out_channels, 3, stride, 1))
        self.bn1 = nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = _kaiming(nn.Conv2d(out_channels, out_channels, 3, 1, 1))
        self.bn2 = nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.skip: nn.Module = nn.Identity()
        if stride != 1 or in_channels != out_channels:
            self.skip = nn.Sequential(
                _kaiming(nn.Conv2d(in_channels, out_channels, 1, stride, 0)),
                nn.BatchNorm2d(out_channels, eps=BN_EPS, momentum=BN_MOMENTUM),
            )

    def forward(self, x):
        y = F.relu(self.bn1(self.conv1(x)))
        y = self.bn2(self.conv2(y))
        return F.relu(y + self.skip(x))


class Sampling(nn.Module):
    """Reparameterized draw z = mu + exp(logvar / 2) * eps; eps = 0 unless noise is on in training mode."""

    def __init__(self):
        super().__init__()
        self.noise_enabled = True
        self.generator = torch.Generator()
        self.generator.manual_seed(0)

    def forward(self, mu, logvar):
        if self.training and self.noise_enabled:
            eps = torch.randn(mu.shape, generator=self.generator, dtype=mu.dtype)
        else:
            eps = torch.zeros_like(mu)
        return mu + torch.exp(0.5 * logvar) * eps


def _param(spec: LayerSpec, key: str, default: Any = None, minimum: Optional[int] = None) -> Any:
    value = spec.params.get(key, default)
    if value is None:
        raise ConfigError(f"Layer '{spec.name}' ({spec.kind}) needs parameter '{key}'")
    if minimum is not None and (not isinstance(value, int) or value < minimum):
        raise ConfigError(f"Layer '{spec.name}': '{key}' must be an integer >= {minimum}, got {value!r}")
    return value


def _conv_out(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def _build_node(spec: LayerSpec, in_shapes: List[Shape]) -> Tuple[nn.Module, List[Shape]]:
    """Construct the module for one node and infer its per-sample output shape(s)."""
    kind = spec.kind
    if kind in SINGLE_INPUT_KINDS and len(in_shapes) != 1:
        raise ConfigError(f"Layer '{spec.name}' ({kind}) takes exactly one input, got {len(in_shapes)}")
    shape = in_shapes[0] if in_shapes else ()

    def need_image(s: Shape) -> None:
        if len(s) != 3:
            raise ShapeError(f"{kind} expects (C, H, W) input, got {s}", layer=spec.name)

    if kind == "conv2d":
        need_image(shape)
        out_channels = _param(spec, "out_channels", minimum=1)
        kernel = _param(spec, "kernel", 3, minimum=1)
        stride = _param(spec, "stride", 1, minimum=1)
        if kernel % 2 == 0:
            raise ConfigError(f"Layer '{spec.name}': kernel must be odd, got {kernel}")
        padding = _param(spec, "padding", kernel // 2, minimum=0)
        module = _kaiming(nn.Conv2d(shape[0], out_channels, kernel, stride, padding))
        out = (out_channels, _conv_out(shape[1], kernel, stride, padding), _conv_out(shape[2], kernel, stride, padding))
    elif kind == "maxpool2d":
        need_image(shape)
        kernel = _param(spec, "kernel", 2, minimum=1)
        stride = _param(spec, "stride", kernel, minimum=1)
        mode = spec.params.get("mode", "max")
        if mode not in ("max", "mean"):
            raise ConfigError(f"Layer '{spec.name}': pool mode must be 'max' or 'mean'")
        module = Pool2d(kernel, stride, mode)
        out = (shape[0], _conv_out(shape[1], kernel, stride, 0), _conv_out(shape[2], kernel, stride, 0))
    elif kind == "batchnorm":
        if len(shape) == 3:
            module = nn.BatchNorm2d(shape[0], eps=BN_EPS, momentum=BN_MOMENTUM)
        elif len(shape) == 1:
            module = nn.BatchNorm1d(shape[0], eps=BN_EPS, momentum=BN_MOMENTUM)
        else:
            raise ShapeError(f"batchnorm expects (C, H, W) or (F,), got {shape}", layer=spec.name)
        out = shape
    elif kind == "relu":
        module, out = nn.ReLU(), shape
    elif kind == "sigmoid":
        module, out = nn.Sigmoid(), shape
    elif kind == "dense":
        if len(shape) != 1:
            raise ShapeError(f"dense expects a flat (F,) input, got {shape}", layer=spec.name)
        units = _param(spec, "units", minimum=1)
        module = _kaiming(nn.Linear(shape[0], units, bias=spec.params.get("bias", True)))
        out = (units,)
    elif kind == "upsample2d":
        need_image(shape)
        factor = _param(spec, "factor", 2, minimum=1)
        module = Upsample2d(factor)
        out = (shape[0], shape[1] * factor, shape[2] * factor)
    elif kind == "concat":
        axis = _param(spec, "axis", 0, minimum=0)
        if not in_shapes or any(len(s) != len(shape) or axis >= len(s) for s in in_shapes):
            raise ShapeError(f"concat inputs {in_shapes} are incompatible", layer=spec.name)
        rest = {s[:axis] + s[axis + 1:] for s in in_shapes}
        if len(rest) != 1:
            raise ShapeError(f"concat inputs {in_shapes} differ off axis {axis}", layer=spec.name)
        module = Concat(axis)
        out = shape[:axis] + (sum(s[axis] for s in in_shapes),) + shape[axis + 1:]
    elif kind == "add":
        if not in_shapes or len(set(in_shapes)) != 1:
            raise ShapeError(f"add inputs must share one shape, got {in_shapes}", layer=spec.name)
        module, out = Add(), shape
    elif kind == "attention":
        heads = _param(spec, "heads", 4, minimum=1)
        if not in_shapes or any(len(s) != 3 or s[0] != shape[0] for s in in_shapes):
            raise ShapeError(f"attention inputs must be (C, H, W) with one C, got {in_shapes}", layer=spec.name)
        if shape[0] % heads:
            raise ConfigError(f"Layer '{spec.name}': {shape[0]} channels not divisible by {heads} heads")
        return TokenAttention(shape[0], heads), list(in_shapes)
    elif kind == "bottleneck_exchange":
        heads = _param(spec, "heads", 4, minimum=1)
        tokens = _param(spec, "tokens", 4, minimum=1)
        if len(in_shapes) != 2 or any(len(s) != 3 or s[0] != shape[0] for s in in_shapes):
            raise ShapeError(f"bottleneck_exchange needs two (C, H, W) inputs with one C, got {in_shapes}",
                             layer=spec.name)
        if shape[0] % heads:
            raise ConfigError(f"Layer '{spec.name}': {shape[0]} channels not divisible by {heads} heads")
        return BottleneckExchange(shape[0], heads, tokens), list(in_shapes)
    elif kind == "residual_block":
        need_image(shape)
        out_channels = _param(spec, "out_channels", minimum=1)
        stride = _param(spec, "stride", 1, minimum=1)
        module = ResidualBlock(shape[0], out_channels, stride)
        out = (out_channels, _conv_out(shape[1], 3, stride, 1), _conv_out(shape[2], 3, stride, 1))
    elif kind == "sampling":
        if len(in_shapes) != 2 or in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"sampling needs (mu, logvar) of one shape, got {in_shapes}", layer=spec.name)
        module, out = Sampling(), shape
    elif kind == "flatten":
        module, out = Flatten(), (int(np.prod(shape)),)
    elif kind == "reshape":
        target = tuple(int(d) for d in _param(spec, "shape"))
        if int(np.prod(target)) != int(np.prod(shape)):
            raise ShapeError(f"cannot reshape {shape} to {target}", layer=spec.name)
        module, out = Reshape(target), target
    else:
        raise ConfigError(f"Unknown layer kind '{kind}'")
    return module, [tuple(int(d) for d in out)]


# =============================================================================
# GRAPH
# =============================================================================

class ModelGraph(nn.Module):
    """
    A DAG of layers over named entry tensors.

    entries: per-sample input shapes by name; layers: LayerSpec nodes in
    topological order (inputs reference entries, earlier nodes, or `name[i]`
    for tuple-valued nodes); outputs: the references returned by `outputs_of`;
    roles: free mapping from semantic role ("acc_recon", "latent", ...) to a
    reference.
    """

    def __init__(
        self,
        entries: Mapping[str, Sequence[int]],
        layers: Sequence[Union[LayerSpec, Mapping[str, Any]]],
        outputs: Sequence[str],
        roles: Optional[Mapping[str, str]] = None,
        seed: int = 0,
    ):
        super().__init__()
        self.entries: Dict[str, Shape] = {name: tuple(int(d) for d in shape) for name, shape in entries.items()}
        self.layer_specs: List[LayerSpec] = [
            spec if isinstance(spec, LayerSpec) else LayerSpec.model_validate(spec) for spec in layers
        ]
        self.outputs: List[str] = list(outputs)
        self.roles: Dict[str, str] = dict(roles or {})
        self.seed = seed
        self.layers = nn.ModuleDict()
        self.shapes: Dict[str, Shape] = dict(self.entries)
        self._last: Optional[Dict[str, torch.Tensor]] = None

        for name in self.entries:
            if not _NAME_RE.match(name):
                raise ConfigError(f"Invalid entry name '{name}'")

        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for spec in self.layer_specs:
                if not _NAME_RE.match(spec.name) or spec.name in self.shapes or spec.name in self.layers:
                    raise ConfigError(f"Layer name '{spec.name}' is invalid or already used")
                in_shapes = [self._shape_of(ref, spec.name) for ref in spec.inputs]
                module, out_shapes = _build_node(spec, in_shapes)
                self.layers[spec.name] = module
                if len(out_shapes) == 1:
                    self.shapes[spec.name] = out_shapes[0]
                else:
                    for i, s in enumerate(out_shapes):
                        self.shapes[f"{spec.name}[{i}]"] = s

        for ref in list(self.outputs) + list(self.roles.values()):
            self._shape_of(ref, "outputs")
        self.set_sampling(True, seed)

    def _shape_of(self, ref: str, consumer: str) -> Shape:
        if not _REF_RE.match(ref) or ref not in self.shapes:
            raise ConfigError(f"Layer '{consumer}' references unknown tensor '{ref}'")
        return self.shapes[ref]

    @property
    def dtype(self) -> torch.dtype:
        for p in self.parameters():
            return p.dtype
        return torch.float32

    def set_sampling(self, enabled: bool, seed: Optional[int] = None) -> None:
        """Turn reparameterization noise on or off and optionally reseed it."""
        for module in self.modules():
            if isinstance(module, Sampling):
                module.noise_enabled = enabled
                if seed is not None:
                    module.generator.manual_seed(seed)

    def forward(self, inputs: Mapping[str, Any]) -> Dict[str, torch.Tensor]:
        """Evaluate every node; returns all activations keyed by reference."""
        missing = [name for name in self.entries if name not in inputs]
        if missing:
            raise InvalidArgumentError(f"Missing graph inputs {missing}; expected {sorted(self.entries)}")
        acts: Dict[str, torch.Tensor] = {}
        # parameter-free graphs keep the input dtype
        dtype = self.dtype if next(self.parameters(), None) is not None else None
        for name, shape in self.entries.items():
            x = torch.as_tensor(inputs[name], dtype=dtype)
            if tuple(x.shape[1:]) != shape:
                raise ShapeError(f"expected (N, {', '.join(map(str, shape))}), got {tuple(x.shape)}", layer=name)
            acts[name] = x

        for spec in self.layer_specs:
            args = [acts[ref] for ref in spec.inputs]
            try:
                out = self.layers[spec.name](*args)
            except RuntimeError as e:
                raise ShapeError(str(e), layer=spec.name) from e
            if isinstance(out, tuple):
                for i, o in enumerate(out):
                    acts[f"{spec.name}[{i}]"] = o
            else:
                acts[spec.name] = out

        if torch.is_grad_enabled():
            self._last = acts
        return acts

    def outputs_of(self, acts: Mapping[str, torch.Tensor]) -> Dict[str, torch.Tensor]:
        return {name: acts[name] for name in self.outputs}

    def backward(self, loss_grad: Union[torch.Tensor, Mapping[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
        """Back-propagate d(loss)/d(output) through the last forward pass; returns parameter gradients."""
        if self._last is None:
            raise StateError("backward() called before forward() on this batch")
        if isinstance(loss_grad, torch.Tensor):
            if len(self.outputs) != 1:
                raise InvalidArgumentError("A bare gradient tensor needs a single-output graph")
            loss_grad = {self.outputs[0]: loss_grad}

        tensors, grads = [], []
        for ref, grad in loss_grad.items():
            if ref not in self._last:
                raise InvalidArgumentError(f"No activation named '{ref}'")
            t = self._last[ref]
            grad = torch.as_tensor(grad, dtype=t.dtype)
            if grad.shape != t.shape:
                raise ShapeError(f"gradient shape {tuple(grad.shape)} != activation shape {tuple(t.shape)}", layer=ref)
            if t.requires_grad:
                tensors.append(t)
                grads.append(grad)

        for p in self.parameters():
            p.grad = None
        if tensors:
            torch.autograd.backward(tensors, grads)
        self._last = None
        return {
            name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in self.named_parameters()
        }

    def structure(self) -> Dict[str, Any]:
        """JSON-ready graph description used by checkpoints."""
        return {
            "entries": {name: list(shape) for name, shape in self.entries.items()},
            "layers": [spec.model_dump() for spec in self.layer_specs],
            "outputs": list(self.outputs),
            "roles": dict(self.roles),
            "seed": self.seed,
        }


def forward(graph: ModelGraph, inputs: Mapping[str, Any]) -> Dict[str, torch.Tensor]:
    return graph(inputs)


def backward(graph: ModelGraph, loss_grad: Union[torch.Tensor, Mapping[str, torch.Tensor]]) -> Dict[str, torch.Tensor]:
    return graph.backward(loss_grad)


def layer_of(parameter_name: str) -> str:
    """'layers.enc1_conv.weight' -> 'enc1_conv'."""
    parts = parameter_name.split(".")
    return parts[1] if len(parts) > 1 and parts[0] == "layers" else parts[0]


def parameter_count(graph: ModelGraph) -> int:
    return sum(p.numel() for p in graph.parameters())


def layer_count(graph: ModelGraph) -> int:
    return len(graph.layer_specs)


# =============================================================================
# OPTIMIZERS
# =============================================================================

def make_optimizer(params: Iterable[torch.nn.Parameter], config: TrainConfig) -> torch.optim.Optimizer:
    """Adam (bias-corrected), plain SGD or Adadelta with the toolkit's constants."""
    params = list(params)
    if config.optimizer == "adam":
        return torch.optim.Adam(params, lr=config.learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)
    if config.optimizer == "sgd":
        return torch.optim.SGD(params, lr=config.learning_rate, momentum=0.0)
    if config.optimizer == "adadelta":
        return torch.optim.Adadelta(params, lr=config.learning_rate, rho=ADADELTA_RHO, eps=ADADELTA_EPS)
    raise ConfigError(f"Unknown optimizer '{config.optimizer}'")


def check_gradients(named_params: Iterable[Tuple[str, torch.nn.Parameter]], step: int) -> None:
    for name, p in named_params:
        if p.grad is not None and not torch.isfinite(p.grad).all():
            raise NonFiniteGradientError(layer=layer_of(name), step=step)


def optimizer_step(optimizer: torch.optim.Optimizer, graph: nn.Module, step: int) -> None:
    """Apply one update after checking every gradient is finite."""
    check_gradients(graph.named_parameters(), step)
    optimizer.step()


# =============================================================================
# TRAINING
# =============================================================================

@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[Optional[float]] = field(default_factory=list)
    best_epoch: int = -1
    best_loss: float = math.inf
    diverged: Optional[str] = None

    @property
    def epochs(self) -> int:
        return len(self.train_loss)

    def to_csv(self, path: Union[str, Path]) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_loss", "best"])
            for epoch, (train_loss, val_loss) in enumerate(zip(self.train_loss, self.val_loss)):
                writer.writerow([
                    epoch,
                    repr(train_loss),
                    "" if val_loss is None else repr(val_loss),
                    int(epoch == self.best_epoch),
                ])


@dataclass
class TrainResult:
    history: TrainHistory
    state: Dict[str, torch.Tensor]


def dataset_length(data: Optional[Mapping[str, np.ndarray]]) -> int:
    if not data:
        return 0
    lengths = {len(v) for v in data.values()}
    if len(lengths) != 1:
        raise InvalidArgumentError(f"Dataset arrays disagree on sample count: {sorted(lengths)}")
    return lengths.pop()


def _batch(data: Mapping[str, np.ndarray], index: np.ndarray, dtype: torch.dtype) -> Dict[str, torch.Tensor]:
    return {name: torch.as_tensor(np.asarray(values)[index], dtype=dtype) for name, values in data.items()}


def _snapshot(graph: nn.Module) -> Dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in graph.state_dict().items()}


def evaluate_loss(graph: ModelGraph, data: Mapping[str, np.ndarray], objective: Objective,
                  batch_size: int = 32) -> float:
    """Sample-weighted mean objective in eval mode."""
    n = dataset_length(data)
    if n == 0:
        raise InvalidArgumentError("Cannot evaluate on an empty dataset")
    was_training = graph.training
    graph.eval()
    total = 0.0
    with torch.no_grad():
        for start in range(0, n, batch_size):
            index = np.arange(start, min(start + batch_size, n))
            batch = _batch(data, index, graph.dtype)
            total += float(objective(graph, batch, graph(batch))) * len(index)
    graph.train(was_training)
    return total / n


def train(
    graph: ModelGraph,
    train_set: Mapping[str, np.ndarray],
    val_set: Optional[Mapping[str, np.ndarray]],
    config: TrainConfig,
    objective: Objective,
) -> TrainResult:
    """
    Mini-batch training with a fixed shuffle order per seed. The returned state (also
    loaded into `graph`) is the epoch with the lowest validation loss, or the lowest
    training loss when the validation set is empty. A NaN loss or gradient stops
    training and keeps the last finite checkpoint.
    """
    n = dataset_length(train_set)
    if n == 0:
        raise InvalidArgumentError("Training set is empty")
    has_val = dataset_length(val_set) > 0

    rng = np.random.default_rng(config.seed)
    graph.set_sampling(True, config.seed)
    optimizer = make_optimizer(graph.parameters(), config)
    history = TrainHistory()
    best_state = _snapshot(graph)
    step = 0

    for epoch in range(config.epochs):
        graph.train()
        order = rng.permutation(n)
        total = 0.0
        try:
            for start in range(0, n, config.batch_size):
                index = order[start:start + config.batch_size]
                batch = _batch(train_set, index, graph.dtype)
                optimizer.zero_grad(set_to_none=True)
                loss = objective(graph, batch, graph(batch))
                if not torch.isfinite(loss):
                    raise NonFiniteGradientError(layer="objective", step=step)
                loss.backward()
                graph._last = None
                optimizer_step(optimizer, graph, step)
                total += float(loss.detach()) * len(index)
                step += 1
        except NonFiniteGradientError as e:
            history.diverged = f"epoch {epoch}: {e}"
            logger.error(f"Training diverged ({history.diverged}); keeping epoch {history.best_epoch} checkpoint")
            break

        train_loss = total / n
        val_loss = evaluate_loss(graph, val_set, objective, config.batch_size) if has_val else None
        history.train_loss.append(train_loss)
        history.val_loss.append(val_loss)
        monitored = val_loss if val_loss is not None else train_loss
        if math.isfinite(monitored) and monitored < history.best_loss:
            history.best_loss = monitored
            history.best_epoch = epoch
            best_state = _snapshot(graph)

        message = f"epoch {epoch + 1}/{config.epochs} train={train_loss:.6g}" + (
            f" val={val_loss:.6g}" if val_loss is not None else ""
        )
        if epoch == 0 or (epoch + 1) % 10 == 0 or epoch + 1 == config.epochs:
            logger.info(message)
        else:
            logger.debug(message)

    graph.load_state_dict(best_state)
    graph.eval()
    return TrainResult(history=history, state=best_state)


# =============================================================================
# CHECKPOINTS
# =============================================================================

def encode_checkpoint(graph: ModelGraph, metadata: Optional[Mapping[str, Any]] = None) -> bytes:
    """
    SDDCKPT1 layout: magic, little-endian uint64 manifest length, canonical JSON
    manifest, then float32 LE blobs for every state tensor in manifest order.
    """
    state = graph.state_dict()
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "graph": graph.structure(),
        "tensors": [{"name": name, "shape": list(t.shape)} for name, t in state.items()],
        "optimizer_state": False,
        "metadata": dict(metadata or {}),
    }
    header = canonical_json(manifest).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<Q", len(header)))
    buffer.write(header)
    for t in state.values():
        buffer.write(t.detach().cpu().to(torch.float32).numpy().astype("<f4").tobytes())
    return buffer.getvalue()


def decode_checkpoint(payload: bytes) -> Tuple[ModelGraph, Dict[str, Any]]:
    magic_len = len(CHECKPOINT_MAGIC)
    if payload[:magic_len] != CHECKPOINT_MAGIC:
        raise CheckpointError("Not an SDD checkpoint (bad magic)")
    if len(payload) < magic_len + 8:
        raise CheckpointError("Checkpoint truncated before manifest")
    (header_len,) = struct.unpack("<Q", payload[magic_len:magic_len + 8])
    offset = magic_len + 8
    try:
        manifest = json.loads(payload[offset:offset + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"Checkpoint manifest is unreadable: {e}") from e
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {manifest.get('format_version')}")
    offset += header_len

    try:
        structure = manifest["graph"]
        graph = ModelGraph(structure["entries"], structure["layers"], structure["outputs"],
                           roles=structure.get("roles"), seed=structure.get("seed", 0))
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint graph description is invalid: {e}") from e

    state: Dict[str, torch.Tensor] = {}
    for entry in manifest["tensors"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        end = offset + 4 * count
        if end > len(payload):
            raise CheckpointError(f"Checkpoint truncated inside tensor '{entry['name']}'")
        values = np.frombuffer(payload[offset:end], dtype="<f4").reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(values.astype(np.float32))
        offset = end
    if offset != len(payload):
        raise CheckpointError(f"Checkpoint has {len(payload) - offset} trailing bytes")

    try:
        graph.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"Checkpoint tensors do not match its graph: {e}") from e
    graph.eval()
    return graph, manifest.get("metadata", {})


def save_checkpoint(graph: ModelGraph, path: Union[str, Path], metadata: Optional[Mapping[str, Any]] = None) -> int:
    payload = encode_checkpoint(graph, metadata)
    Path(path).write_bytes(payload)
    logger.info(f"Saved checkpoint {path} ({len(payload)} bytes)")
    return len(payload)


def load_checkpoint(path: Union[str, Path]) -> Tuple[ModelGraph, Dict[str, Any]]:
    p = Path(path)
    if not p.exists():
        raise CheckpointError(f"Checkpoint not found: {p}")
    return decode_checkpoint(p.read_bytes())


def serialized_size(graph: ModelGraph) -> int:
    """Bytes of the checkpoint encoding (no metadata)."""
    return len(encode_checkpoint(graph))
