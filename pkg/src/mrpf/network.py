"""Prunable layered networks built on the autodiff graphs.

A :class:`Network` is an ordered list of dense, conv2d and relu layers.  Dense
and conv2d layers carry a weight of shape ``(out, in)`` or ``(out, in, K, K)``
and a bias of length ``out``.  A dense layer that follows a conv2d layer
flattens its ``(C, H, W)`` input, so its ``in_channels`` is ``C * H * W``.

Every weighted layer except the last (the classifier) is prunable: removing
output channel ``j`` of layer ``i`` drops row ``j`` of its weight, bias ``j``,
and the matching input slice of the next weighted layer.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import tensorio

WEIGHTED = ("dense", "conv2d")


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int | None = None
    out_channels: int | None = None
    kernel: int | None = None
    padding: str = "same"

    def __post_init__(self):
        if self.kind not in ("dense", "conv2d", "relu"):
            raise NetworkError(f"unknown layer kind {self.kind!r}")
        if self.kind in WEIGHTED:
            for v in (self.in_channels, self.out_channels):
                if not isinstance(v, (int, np.integer)) or v < 1:
                    raise NetworkError(f"{self.kind} layer needs positive channel counts")
        if self.kind == "conv2d":
            if not isinstance(self.kernel, (int, np.integer)) or self.kernel < 1:
                raise NetworkError("conv2d layer needs a positive kernel size")
            if self.padding not in ("same", "valid"):
                raise NetworkError(f"unknown padding {self.padding!r}")
            if self.padding == "same" and self.kernel % 2 == 0:
                raise NetworkError("'same' padding needs an odd kernel")

    @property
    def weighted(self) -> bool:
        return self.kind in WEIGHTED

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == "dense":
            return (self.out_channels, self.in_channels)
        if self.kind == "conv2d":
            return (self.out_channels, self.in_channels, self.kernel, self.kernel)
        return ()

    def with_channels(self, in_channels=None, out_channels=None) -> "LayerSpec":
        return LayerSpec(
            self.kind,
            self.in_channels if in_channels is None else int(in_channels),
            self.out_channels if out_channels is None else int(out_channels),
            self.kernel,
            self.padding,
        )

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.weighted:
            d.update(in_channels=int(self.in_channels), out_channels=int(self.out_channels))
        if self.kind == "conv2d":
            d.update(kernel=int(self.kernel), padding=self.padding)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "LayerSpec":
        return cls(
            d["kind"],
            d.get("in_channels"),
            d.get("out_channels"),
            d.get("kernel"),
            d.get("padding", "same"),
        )


def dense(n_in: int, n_out: int) -> LayerSpec:
    return LayerSpec("dense", n_in, n_out)


def conv2d(n_in: int, n_out: int, kernel: int, padding: str = "same") -> LayerSpec:
    return LayerSpec("conv2d", n_in, n_out, kernel, padding)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def mlp(sizes: Sequence[int]) -> list[LayerSpec]:
    """Dense layers with relu between them, e.g. ``mlp([2, 64, 64, 2])``."""
    specs: list[LayerSpec] = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        if i:
            specs.append(relu())
        specs.append(dense(a, b))
    return specs


def _activation_shapes(specs: Sequence[LayerSpec], input_shape: tuple[int, ...]) -> list[tuple]:
    """Per-example output shape of every layer; raises on channel mismatch."""
    shape = tuple(input_shape)
    out = []
    for i, s in enumerate(specs):
        if s.kind == "dense":
            width = int(np.prod(shape))
            if width != s.in_channels:
                raise NetworkError(
                    f"layer {i}: dense expects {s.in_channels} inputs but receives {shape}"
                )
            shape = (s.out_channels,)
        elif s.kind == "conv2d":
            if len(shape) != 3 or shape[0] != s.in_channels:
                raise NetworkError(
                    f"layer {i}: conv2d expects {s.in_channels} channels but receives {shape}"
                )
            h, w = shape[1:]
            if s.padding == "valid":
                h, w = h - s.kernel + 1, w - s.kernel + 1
                if h < 1 or w < 1:
                    raise NetworkError(f"layer {i}: kernel larger than input")
            shape = (s.out_channels, h, w)
        out.append(shape)
    return out


def _default_input_shape(specs: Sequence[LayerSpec]) -> tuple[int, ...]:
    first = next((s for s in specs if s.weighted), None)
    if first is None:
        raise NetworkError("network needs at least one dense or conv2d layer")
    if first.kind == "conv2d":
        raise NetworkError("conv networks need an explicit input_shape (C, H, W)")
    return (first.in_channels,)


class Network:
    """Layer specs plus weights. Treated as a value: operations return new networks."""

    def __init__(
        self,
        layers: Sequence[LayerSpec],
        weights: Sequence[np.ndarray | None],
        biases: Sequence[np.ndarray | None],
        input_shape: Sequence[int] | None = None,
        seed: int | None = None,
        precision: int = 64,
    ):
        self.layers = tuple(layers)
        if not any(s.weighted for s in self.layers):
            raise NetworkError("network needs at least one dense or conv2d layer")
        if not self.layers[-1].weighted:
            raise NetworkError("last layer must be dense or conv2d (it produces the logits)")
        self.input_shape = tuple(int(v) for v in (input_shape or _default_input_shape(self.layers)))
        self.shapes = _activation_shapes(self.layers, self.input_shape)
        if precision not in (32, 64):
            raise NetworkError("precision must be 32 or 64")
        self.precision = precision
        self.seed = seed
        dtype = np.float64 if precision == 64 else np.float32
        self.weights: list[np.ndarray | None] = []
        self.biases: list[np.ndarray | None] = []
        for i, s in enumerate(self.layers):
            w, b = weights[i], biases[i]
            if not s.weighted:
                self.weights.append(None)
                self.biases.append(None)
                continue
            w = np.asarray(w, dtype=dtype)
            b = np.asarray(b, dtype=dtype)
            if w.shape != s.weight_shape():
                raise NetworkError(f"layer {i}: weight shape {w.shape} != {s.weight_shape()}")
            if b.shape != (s.out_channels,):
                raise NetworkError(f"layer {i}: bias shape {b.shape} != ({s.out_channels},)")
            self.weights.append(w)
            self.biases.append(b)

    # structure ---------------------------------------------------------------

    @property
    def weighted_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if s.weighted]

    @property
    def classifier(self) -> int:
        return self.weighted_layers[-1]

    @property
    def prunable_layers(self) -> list[int]:
        return self.weighted_layers[:-1]

    @property
    def num_classes(self) -> int:
        return self.layers[self.classifier].out_channels

    def next_weighted(self, i: int) -> int:
        for j in range(i + 1, len(self.layers)):
            if self.layers[j].weighted:
                return j
        raise NetworkError(f"layer {i} has no downstream weighted layer")

    def layer_name(self, i: int) -> str:
        return f"{self.layers[i].kind}{i}"

    def channels(self, i: int) -> int:
        return self.layers[i].out_channels

    # parameters --------------------------------------------------------------

    def param_names(self) -> list[str]:
        names = []
        for i in self.weighted_layers:
            names += [f"W{i}", f"b{i}"]
        return names

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for i in self.weighted_layers:
            out[f"W{i}"] = self.weights[i]
            out[f"b{i}"] = self.biases[i]
        return out

    def with_params(self, updates: Mapping[str, np.ndarray]) -> "Network":
        """Copy of the network with some parameters replaced."""
        weights = list(self.weights)
        biases = list(self.biases)
        for name, v in updates.items():
            kind, idx = name[0], int(name[1:])
            if kind == "W":
                weights[idx] = v
            elif kind == "b":
                biases[idx] = v
            else:
                raise KeyError(name)
        return Network(self.layers, weights, biases, self.input_shape, self.seed, self.precision)

    def clone(self) -> "Network":
        return Network(
            self.layers,
            [None if w is None else w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.input_shape,
            self.seed,
            self.precision,
        )

    def num_parameters(self) -> int:
        return int(sum(v.size for v in self.params().values()))

    # graphs ------------------------------------------------------------------

    def param_leaves(self, trainable: Iterable[str] | None = None) -> dict[str, ad.Node]:
        """Leaf nodes for every parameter; only ``trainable`` ones are differentiable."""
        trainable = set(self.param_names() if trainable is None else trainable)
        return {n: ad.leaf(n, frozen=n not in trainable) for n in self.param_names()}

    def logits_node(self, x: ad.Node, leaves: Mapping[str, ad.Node]) -> ad.Node:
        h = x
        prev = None
        for i, s in enumerate(self.layers):
            if s.kind == "relu":
                h = ad.relu(h)
            elif s.kind == "dense":
                if prev is not None and len(prev) > 1:
                    h = ad.flatten(h)
                h = ad.add(ad.matmul(h, leaves[f"W{i}"], transpose_b=True), leaves[f"b{i}"], axis=-1)
            else:
                h = ad.add(ad.conv2d(h, leaves[f"W{i}"], s.padding), leaves[f"b{i}"], axis=1)
            prev = self.shapes[i]
        return h

    def bindings(self) -> dict[str, np.ndarray]:
        return dict(self.params())

    def check_batch(self, batch: np.ndarray) -> np.ndarray:
        batch = np.asarray(batch)
        if batch.ndim != len(self.input_shape) + 1 or batch.shape[1:] != self.input_shape:
            raise ad.ShapeError(
                f"batch shape {batch.shape} does not match (B,) + {self.input_shape}"
            )
        return batch

    # value semantics -----------------------------------------------------------

    def __eq__(self, other):
        if not isinstance(other, Network):
            return NotImplemented
        if (self.layers, self.input_shape, self.precision, self.seed) != (
            other.layers,
            other.input_shape,
            other.precision,
            other.seed,
        ):
            return False
        for a, b in zip(self.weights + self.biases, other.weights + other.biases):
            if a is None or b is None:
                if a is not b:
                    return False
            elif a.dtype != b.dtype or not np.array_equal(a, b):
                return False
        return True

    __hash__ = None

    def __repr__(self):
        arch = "-".join(
            str(s.out_channels) if s.weighted else s.kind for s in self.layers
        )
        return f"Network(input={self.input_shape}, layers={arch})"


def build(
    specs: Sequence[LayerSpec],
    seed: int,
    input_shape: Sequence[int] | None = None,
    precision: int = 64,
) -> Network:
    """Fresh network, weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    specs = list(specs)
    shape = tuple(input_shape) if input_shape is not None else _default_input_shape(specs)
    _activation_shapes(specs, shape)
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for s in specs:
        if not s.weighted:
            weights.append(None)
            biases.append(None)
            continue
        fan_in = s.in_channels * (s.kernel**2 if s.kind == "conv2d" else 1)
        bound = 1.0 / math.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=s.weight_shape()))
        biases.append(rng.uniform(-bound, bound, size=(s.out_channels,)))
    return Network(specs, weights, biases, shape, seed, precision)


_GRAPH_CACHE: dict = {}


def _logits_graph(net: Network) -> ad.ExprGraph:
    key = (net.layers, net.input_shape)
    g = _GRAPH_CACHE.get(key)
    if g is None:
        g = ad.ExprGraph(net.logits_node(ad.leaf("x", frozen=True), net.param_leaves(())))
        if len(_GRAPH_CACHE) > 256:
            _GRAPH_CACHE.clear()
        _GRAPH_CACHE[key] = g
    return g


def forward(net: Network, batch) -> np.ndarray:
    """Logits for a ``(B,) + input_shape`` batch."""
    batch = net.check_batch(batch)
    return ad.evaluate(_logits_graph(net), {"x": batch, **net.params()})


def predict(net: Network, batch) -> np.ndarray:
    return forward(net, batch).argmax(axis=-1)


# --- surgery ------------------------------------------------------------------


@dataclass(frozen=True)
class SurgeryMap:
    """Retained output-channel indices per prunable layer (missing layers keep all)."""

    retained: Mapping[int, tuple[int, ...]] = field(default_factory=dict)

    def __post_init__(self):
        clean = {}
        for layer, idx in self.retained.items():
            idx = [int(v) for v in idx]
            if len(set(idx)) != len(idx):
                raise NetworkError(f"layer {layer}: retained indices are not distinct")
            if not idx:
                raise NetworkError(f"layer {layer}: surgery would empty the layer")
            clean[int(layer)] = tuple(sorted(idx))
        object.__setattr__(self, "retained", clean)

    @classmethod
    def from_pruned(cls, net: Network, pruned: Mapping[int, Iterable[int]]) -> "SurgeryMap":
        retained = {}
        for layer, drop in pruned.items():
            drop = set(int(v) for v in drop)
            retained[layer] = tuple(j for j in range(net.channels(layer)) if j not in drop)
        return cls(retained)

    def compose(self, then: "SurgeryMap") -> "SurgeryMap":
        """Single map equivalent to applying ``self`` and then ``then``.

        ``then`` indexes channels of the already-pruned network.
        """
        out = dict(self.retained)
        for layer, idx in then.retained.items():
            base = self.retained.get(layer)
            out[layer] = tuple(idx) if base is None else tuple(base[j] for j in idx)
        return SurgeryMap(out)


def remove_channels(net: Network, surgery: SurgeryMap) -> Network:
    """New network with the non-retained channels physically removed."""
    weights = [None if w is None else w.copy() for w in net.weights]
    biases = [None if b is None else b.copy() for b in net.biases]
    layers = list(net.layers)
    prunable = set(net.prunable_layers)
    for layer in surgery.retained:
        if layer not in prunable:
            raise NetworkError(f"layer {layer} is not prunable")
        keep = np.asarray(surgery.retained[layer])
        if keep[-1] >= net.channels(layer) or keep[0] < 0:
            raise NetworkError(f"layer {layer}: retained index out of range")

    for layer in sorted(surgery.retained):
        keep = np.asarray(surgery.retained[layer])
        weights[layer] = weights[layer][keep]
        biases[layer] = biases[layer][keep]
        layers[layer] = layers[layer].with_channels(out_channels=len(keep))
        nxt = net.next_weighted(layer)
        spec = layers[nxt]
        if spec.kind == "dense" and len(net.shapes[layer]) > 1:
            # dense after conv: each channel owns a contiguous H*W block of columns
            hw = int(np.prod(net.shapes[layer][1:]))
            cols = (keep[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
            weights[nxt] = weights[nxt][:, cols]
            layers[nxt] = spec.with_channels(in_channels=len(cols))
        else:
            weights[nxt] = weights[nxt][:, keep]
            layers[nxt] = spec.with_channels(in_channels=len(keep))
    return Network(layers, weights, biases, net.input_shape, net.seed, net.precision)


# --- FLOPs --------------------------------------------------------------------


def layer_flops(net: Network, i: int) -> int:
    s = net.layers[i]
    if s.kind == "dense":
        return s.out_channels * s.in_channels
    if s.kind == "conv2d":
        _, h, w = net.shapes[i]
        return s.out_channels * s.in_channels * s.kernel**2 * h * w
    return 0


def flops(net: Network) -> int:
    """Multiply-accumulates for one example."""
    return int(sum(layer_flops(net, i) for i in range(len(net.layers))))


def flops_reduction(original: Network, pruned: Network) -> float:
    base = flops(original)
    if base == 0:
        raise NetworkError("original network has zero FLOPs")
    return 1.0 - flops(pruned) / base


# --- checkpoints --------------------------------------------------------------


class CheckpointError(ValueError):
    pass


def save_checkpoint(net: Network, directory, name: str) -> Path:
    """Write ``name.json`` plus one MRPT file per parameter; returns the header path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}
    for pname, arr in net.params().items():
        fname = f"{name}.{pname}.mrpt"
        tensorio.save(directory / fname, arr, precision=net.precision)
        tensors[pname] = fname
    header = {
        "specs": [s.to_dict() for s in net.layers],
        "input_shape": list(net.input_shape),
        "seed": net.seed,
        "precision": net.precision,
        "tensors": tensors,
    }
    path = directory / f"{name}.json"
    path.write_text(json.dumps(header, indent=2))
    return path


def load_checkpoint(path) -> Network:
    path = Path(path)
    try:
        header = json.loads(path.read_text())
        specs = [LayerSpec.from_dict(d) for d in header["specs"]]
        tensors = header["tensors"]
    except (OSError, ValueError, KeyError) as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint header ({exc})") from exc
    weights, biases = [], []
    for i, s in enumerate(specs):
        if not s.weighted:
            weights.append(None)
            biases.append(None)
            continue
        try:
            weights.append(tensorio.load(path.parent / tensors[f"W{i}"]))
            biases.append(tensorio.load(path.parent / tensors[f"b{i}"]))
        except KeyError as exc:
            raise CheckpointError(f"{path}: missing tensor entry {exc}") from exc
    return Network(
        specs, weights, biases, header["input_shape"], header.get("seed"), header.get("precision", 64)
    )
