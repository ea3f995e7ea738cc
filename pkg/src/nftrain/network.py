"""Backbone networks with attached exit classifier blocks.

Two desk-scale backbones are provided.  ``cnn-6`` stacks three convolution
blocks (two 3x3 convs + 2x2 max pool each) and a two-layer head; exits attach
at the end of each convolution block.  ``mlp-4`` is a four-layer perceptron
with exits after the first two hidden layers.

Each exit reads the trunk activation at its attach point through adaptive
average pooling (convolutional backbones) and two fully connected layers.
Exits never write to the trunk, so backbone logits are identical with or
without them.
"""

from dataclasses import dataclass, field, replace
from statistics import median

import numpy as np

from . import tensor as ops
from .errors import ConfigError, ShapeError
from .streams import INIT, substream
from .tensor import Tensor

# Exits must stay near-equal in size: flatten widths within this fraction of
# their median (applies where pooling defines a flatten width).
FLATTEN_BALANCE_TOLERANCE = 0.30


@dataclass(frozen=True)
class ExitBlockSpec:
    """One exit: attach point, pooling target, hidden width, class count."""

    attach_after: int
    pool_target: tuple | None
    hidden: int
    classes: int


@dataclass(frozen=True)
class BackboneSpec:
    """Named backbone architecture plus input geometry and class count.

    cnn-6: ``channels`` gives the width of each convolution block (two convs
    per block), ``head_hidden`` the fully connected width before the logits.
    mlp-4: ``mlp_hidden`` gives the three hidden widths.
    """

    name: str = "cnn-6"
    input_shape: tuple = (28, 28, 1)
    classes: int = 10
    channels: tuple = (16, 32, 48)
    head_hidden: int = 256
    mlp_hidden: tuple = (256, 128, 64)

    def __post_init__(self):
        if self.name not in ("cnn-6", "mlp-4"):
            raise ConfigError(f"unknown backbone {self.name!r}")
        if self.name == "cnn-6" and len(self.input_shape) != 3:
            raise ConfigError(f"cnn-6 expects (h, w, c) input, got {self.input_shape}")
        if self.name == "mlp-4" and len(self.input_shape) != 1:
            raise ConfigError(f"mlp-4 expects (features,) input, got {self.input_shape}")

    @property
    def num_blocks(self) -> int:
        return len(self.channels) if self.name == "cnn-6" else len(self.mlp_hidden)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "classes": self.classes,
            "channels": list(self.channels),
            "head_hidden": self.head_hidden,
            "mlp_hidden": list(self.mlp_hidden),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneSpec":
        return cls(
            name=d.get("name", "cnn-6"),
            input_shape=tuple(d["input_shape"]),
            classes=int(d.get("classes", 10)),
            channels=tuple(d.get("channels", (16, 32, 48))),
            head_hidden=int(d.get("head_hidden", 256)),
            mlp_hidden=tuple(d.get("mlp_hidden", (256, 128, 64))),
        )


def default_exits(backbone: BackboneSpec) -> list:
    """The standard exit layout for each backbone."""
    k = backbone.classes
    if backbone.name == "cnn-6":
        return [
            ExitBlockSpec(1, (4, 4), 64, k),
            ExitBlockSpec(2, (3, 3), 64, k),
            ExitBlockSpec(3, (2, 2), 64, k),
        ]
    return [ExitBlockSpec(1, None, 32, k), ExitBlockSpec(2, None, 32, k)]


@dataclass
class ForwardBundle:
    """Backbone logits plus the ordered exit logits from one forward pass."""

    backbone_logits: Tensor
    exit_logits: list

    def __post_init__(self):
        shape = self.backbone_logits.data.shape
        for i, t in enumerate(self.exit_logits):
            if t.data.shape != shape:
                raise ShapeError(f"exit {i + 1} logits {t.data.shape} do not match backbone {shape}")


def _trunk_shapes(spec: BackboneSpec):
    """Activation shape after each trunk block (exclusive of the head)."""
    shapes = []
    if spec.name == "cnn-6":
        h, w, _ = spec.input_shape
        for c in spec.channels:
            h, w = h // 2, w // 2  # two same-size convs then 2x2 pool
            if h < 1 or w < 1:
                raise ConfigError(f"input {spec.input_shape} too small for {len(spec.channels)} pooled blocks")
            shapes.append((h, w, c))
    else:
        for width in spec.mlp_hidden:
            shapes.append((width,))
    return shapes


def exit_flatten_sizes(backbone: BackboneSpec, exits) -> list:
    shapes = _trunk_shapes(backbone)
    sizes = []
    for ex in exits:
        shape = shapes[ex.attach_after - 1]
        if ex.pool_target is not None:
            th, tw = ex.pool_target
            sizes.append(th * tw * shape[2])
        else:
            sizes.append(int(np.prod(shape)))
    return sizes


def _validate_exits(backbone: BackboneSpec, exits):
    for ex in exits:
        if not 1 <= ex.attach_after <= backbone.num_blocks:
            raise ConfigError(
                f"exit attach point {ex.attach_after} outside [1, {backbone.num_blocks}]"
            )
        if ex.classes != backbone.classes:
            raise ConfigError(f"exit classes {ex.classes} != backbone classes {backbone.classes}")
        if ex.pool_target is None and backbone.name == "cnn-6":
            raise ConfigError("cnn-6 exits need a pool_target")
        if ex.pool_target is not None and backbone.name == "mlp-4":
            raise ConfigError("mlp-4 exits take no pooling")
    pooled = [ex for ex in exits if ex.pool_target is not None]
    if len(pooled) >= 2:
        sizes = exit_flatten_sizes(backbone, pooled)
        mid = median(sizes)
        for ex, size in zip(pooled, sizes):
            if abs(size - mid) > FLATTEN_BALANCE_TOLERANCE * mid:
                raise ConfigError(
                    f"exit at block {ex.attach_after} flatten size {size} deviates more than "
                    f"{FLATTEN_BALANCE_TOLERANCE:.0%} from the median {mid}"
                )


class MultiExitNetwork:
    """A backbone plus s exit blocks, with named parameter tensors."""

    def __init__(self, backbone: BackboneSpec, exits, params: dict):
        self.backbone = backbone
        self.exits = list(exits)
        self.params = params
        self.trunk_layer_evals = 0  # incremented per trunk conv/fc application

    # -- parameter access ---------------------------------------------------

    def weight_arrays(self) -> dict:
        return {name: t.data for name, t in self.params.items()}

    def set_weights(self, arrays: dict) -> None:
        for name, arr in arrays.items():
            if name not in self.params:
                raise KeyError(f"unknown parameter {name!r}")
            if self.params[name].data.shape != arr.shape:
                raise ShapeError(
                    f"parameter {name!r}: stored shape {self.params[name].data.shape} vs {arr.shape}"
                )
            self.params[name].data = arr.astype(self.params[name].data.dtype, copy=True)

    def perturbable(self) -> dict:
        """Conv/FC weight matrices (biases live in digital periphery)."""
        return {n: t.data for n, t in self.params.items() if t.data.ndim >= 2}

    def backbone_param_names(self) -> list:
        return [n for n in self.params if n.startswith("backbone.")]

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.grad = None

    def clone(self) -> "MultiExitNetwork":
        params = {n: Tensor(t.data.copy(), requires_grad=t.requires_grad) for n, t in self.params.items()}
        return MultiExitNetwork(self.backbone, list(self.exits), params)

    def arch_dict(self) -> dict:
        return {
            "backbone": self.backbone.to_dict(),
            "exits": [
                {
                    "attach_after": e.attach_after,
                    "pool_target": list(e.pool_target) if e.pool_target else None,
                    "hidden": e.hidden,
                    "classes": e.classes,
                }
                for e in self.exits
            ],
        }

    @property
    def dtype(self):
        return next(iter(self.params.values())).data.dtype

    # -- forward passes -----------------------------------------------------

    def _check_batch(self, batch):
        data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
        expected = tuple(self.backbone.input_shape)
        if data.shape[1:] != expected:
            raise ShapeError(f"batch shape {data.shape} does not match input spec {expected}")
        if isinstance(batch, Tensor):
            return batch
        return Tensor(data.astype(self.dtype, copy=False))

    def _trunk(self, x):
        """Run the shared trunk; returns (block activations, pre-head activation)."""
        p = self.params
        taps = []
        if self.backbone.name == "cnn-6":
            for bi in range(len(self.backbone.channels)):
                for ci in range(2):
                    x = ops.conv2d(x, p[f"backbone.b{bi + 1}.conv{ci}.w"], 1, 1, p[f"backbone.b{bi + 1}.conv{ci}.b"])
                    x = ops.relu(x)
                    self.trunk_layer_evals += 1
                x = ops.max_pool2d(x, 2)
                taps.append(x)
        else:
            for bi in range(len(self.backbone.mlp_hidden)):
                x = ops.linear(x, p[f"backbone.b{bi + 1}.fc.w"], p[f"backbone.b{bi + 1}.fc.b"])
                x = ops.relu(x)
                self.trunk_layer_evals += 1
                taps.append(x)
        return taps, x

    def _head(self, x):
        p = self.params
        if self.backbone.name == "cnn-6":
            x = ops.flatten(x)
            x = ops.relu(ops.linear(x, p["backbone.head.fc0.w"], p["backbone.head.fc0.b"]))
            self.trunk_layer_evals += 1
        x = ops.linear(x, p["backbone.head.fc1.w"], p["backbone.head.fc1.b"])
        self.trunk_layer_evals += 1
        return x

    def _exit(self, i, tap):
        p = self.params
        ex = self.exits[i]
        x = tap
        if ex.pool_target is not None:
            x = ops.flatten(ops.avg_pool2d(x, ex.pool_target))
        x = ops.relu(ops.linear(x, p[f"exit{i + 1}.fc0.w"], p[f"exit{i + 1}.fc0.b"]))
        return ops.linear(x, p[f"exit{i + 1}.fc1.w"], p[f"exit{i + 1}.fc1.b"])

    def forward_all(self, batch) -> ForwardBundle:
        """One shared-trunk pass producing backbone and every exit's logits."""
        x = self._check_batch(batch)
        taps, trunk_out = self._trunk(x)
        logits = self._head(trunk_out)
        exit_logits = [self._exit(i, taps[ex.attach_after - 1]) for i, ex in enumerate(self.exits)]
        return ForwardBundle(logits, exit_logits)

    def forward_backbone_only(self, batch) -> Tensor:
        """Backbone logits only; exit parameters are never touched."""
        x = self._check_batch(batch)
        _, trunk_out = self._trunk(x)
        return self._head(trunk_out)


def _he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def build_network(backbone: BackboneSpec, exits=None, init_seed: int = 0, dtype=np.float32) -> MultiExitNetwork:
    """Deterministically initialized network: He fan-in weights, zero biases."""
    exits = default_exits(backbone) if exits is None else sorted(exits, key=lambda e: e.attach_after)
    _validate_exits(backbone, exits)
    rng = substream(init_seed, INIT)
    params = {}

    def add_fc(prefix, fan_in, fan_out):
        params[f"{prefix}.w"] = Tensor(_he_normal(rng, (fan_in, fan_out), fan_in, dtype), requires_grad=True)
        params[f"{prefix}.b"] = Tensor(np.zeros(fan_out, dtype=dtype), requires_grad=True)

    if backbone.name == "cnn-6":
        h, w, cin = backbone.input_shape
        c_prev = cin
        for bi, c in enumerate(backbone.channels):
            for ci in range(2):
                fan_in = 3 * 3 * c_prev
                params[f"backbone.b{bi + 1}.conv{ci}.w"] = Tensor(
                    _he_normal(rng, (3, 3, c_prev, c), fan_in, dtype), requires_grad=True
                )
                params[f"backbone.b{bi + 1}.conv{ci}.b"] = Tensor(np.zeros(c, dtype=dtype), requires_grad=True)
                c_prev = c
        final_h, final_w, final_c = _trunk_shapes(backbone)[-1]
        add_fc("backbone.head.fc0", final_h * final_w * final_c, backbone.head_hidden)
        add_fc("backbone.head.fc1", backbone.head_hidden, backbone.classes)
    else:
        widths = [backbone.input_shape[0], *backbone.mlp_hidden]
        for bi in range(len(backbone.mlp_hidden)):
            add_fc(f"backbone.b{bi + 1}.fc", widths[bi], widths[bi + 1])
        add_fc("backbone.head.fc1", widths[-1], backbone.classes)

    flat_sizes = exit_flatten_sizes(backbone, exits)
    for i, ex in enumerate(exits):
        add_fc(f"exit{i + 1}.fc0", flat_sizes[i], ex.hidden)
        add_fc(f"exit{i + 1}.fc1", ex.hidden, ex.classes)

    return MultiExitNetwork(backbone, exits, params)


def parameter_census(net: MultiExitNetwork) -> dict:
    """Exact trainable-parameter counts for the backbone and each exit."""
    census = {"backbone": 0}
    for i in range(len(net.exits)):
        census[f"exit{i + 1}"] = 0
    for name, t in net.params.items():
        census[name.split(".")[0]] += t.data.size
    return census


def accuracy(logits, labels) -> float:
    """Fraction of argmax predictions matching integer labels."""
    arr = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return float(np.mean(np.argmax(arr, axis=1) == np.asarray(labels)))
