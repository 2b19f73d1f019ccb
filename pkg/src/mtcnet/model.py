"""MTCNet: shared VGG-style frontend, two branches, density and count-group heads.

Layer layout (``paper`` preset channel counts)::

    frontend   conv 64, 64, pool, 128, 128, pool, 256 x3, pool, 512 x3   (stride 8)
    x1         conv 512, 512                          -> X1
    x2         conv 512, 128                          -> X2
    backend    concat(X1, X2) = 640 ch, six dilation-2 convs 512,512,512,256,128,64,
               then a 1x1 conv to one density channel
    classifier adaptive max-pool(X2) -> flatten -> dense 512 -> 256 -> 10 logits

ReLU follows every 3x3 conv and the first two dense layers.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .errors import ShapeError, WeightMismatchError
from .serialization import dumps_weights, loads_weights
from .tensor import Tensor

STRIDE = 8
POOL_AFTER = (1, 3, 6)  # frontend conv indices followed by a 2x2 max-pool
INIT_STD = 0.01


@dataclass(frozen=True)
class ArchPreset:
    name: str
    frontend: tuple
    x1: tuple
    x2: tuple
    backend: tuple
    pool_target: tuple
    dense: tuple
    num_classes: int = 10
    in_channels: int = 3
    backend_dilation: int = 2
    init: str = "gaussian"


PAPER = ArchPreset(
    name="paper",
    frontend=(64, 64, 128, 128, 256, 256, 256, 512, 512, 512),
    x1=(512, 512),
    x2=(512, 128),
    backend=(512, 512, 512, 256, 128, 64),
    pool_target=(64, 64),
    dense=(512, 256),
)

DESK = ArchPreset(
    name="desk",
    frontend=tuple(c // 8 for c in PAPER.frontend),
    x1=tuple(c // 8 for c in PAPER.x1),
    x2=tuple(c // 8 for c in PAPER.x2),
    backend=tuple(c // 8 for c in PAPER.backend),
    pool_target=(8, 8),
    dense=tuple(c // 8 for c in PAPER.dense),
    init="he",
)

PRESETS = {"paper": PAPER, "desk": DESK}


def get_preset(preset) -> ArchPreset:
    if isinstance(preset, ArchPreset):
        return preset
    try:
        return PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}") from None


@dataclass(frozen=True)
class LayerDef:
    name: str
    kind: str  # "conv" or "dense"
    group: str  # frontend | x1 | x2 | backend | classifier
    in_dim: int
    out_dim: int
    kernel: int = 3
    dilation: int = 1
    relu: bool = True

    @property
    def weight_shape(self):
        if self.kind == "conv":
            return (self.out_dim, self.in_dim, self.kernel, self.kernel)
        return (self.out_dim, self.in_dim)

    @property
    def fan_in(self):
        return self.in_dim * (self.kernel * self.kernel if self.kind == "conv" else 1)


def layer_defs(preset) -> list:
    p = get_preset(preset)
    layers = []
    prev = p.in_channels
    for i, c in enumerate(p.frontend):
        layers.append(LayerDef(f"frontend.conv{i + 1}", "conv", "frontend", prev, c))
        prev = c
    shared = prev
    for i, c in enumerate(p.x1):
        layers.append(LayerDef(f"x1.conv{i + 1}", "conv", "x1", prev, c))
        prev = c
    x1_out = prev
    prev = shared
    for i, c in enumerate(p.x2):
        layers.append(LayerDef(f"x2.conv{i + 1}", "conv", "x2", prev, c))
        prev = c
    x2_out = prev
    prev = x1_out + x2_out
    for i, c in enumerate(p.backend):
        layers.append(LayerDef(f"backend.conv{i + 1}", "conv", "backend", prev, c,
                               dilation=p.backend_dilation))
        prev = c
    layers.append(LayerDef("backend.output", "conv", "backend", prev, 1, kernel=1, relu=False))
    prev = x2_out * p.pool_target[0] * p.pool_target[1]
    for i, c in enumerate(p.dense):
        layers.append(LayerDef(f"classifier.dense{i + 1}", "dense", "classifier", prev, c))
        prev = c
    layers.append(LayerDef(f"classifier.dense{len(p.dense) + 1}", "dense", "classifier",
                           prev, p.num_classes, relu=False))
    return layers


def param_shapes(preset) -> dict:
    shapes = {}
    for layer in layer_defs(preset):
        shapes[f"{layer.name}.weight"] = layer.weight_shape
        shapes[f"{layer.name}.bias"] = (layer.out_dim,)
    return shapes


def param_count(preset) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(preset).values())


def param_groups(preset) -> dict:
    """Map each parameter name to its layer group."""
    groups = {}
    for layer in layer_defs(preset):
        groups[f"{layer.name}.weight"] = layer.group
        groups[f"{layer.name}.bias"] = layer.group
    return groups


class ModelParams(Mapping):
    """Ordered ``name -> Tensor`` mapping bound to an architecture preset."""

    def __init__(self, preset, tensors):
        self.preset = get_preset(preset)
        self.tensors = dict(tensors)

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self):
        return len(self.tensors)

    def names_in(self, *groups):
        groups_of = param_groups(self.preset)
        return [name for name in self.tensors if groups_of[name] in groups]

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ModelParams(self.preset, {k: Tensor(v.data, requires_grad=v.requires_grad)
                                         for k, v in self.tensors.items()})

    def state(self):
        return {k: v.data for k, v in self.tensors.items()}


def init_std(layer: LayerDef, scheme: str) -> float:
    """``gaussian``: 0.01 everywhere.  ``he``: sqrt(2 / fan_in) for layers
    followed by a ReLU; the two linear read-out layers keep std 0.01 so the
    initial density map and logits start near zero."""
    if scheme == "gaussian":
        return INIT_STD
    if scheme == "he":
        return float(np.sqrt(2.0 / layer.fan_in)) if layer.relu else INIT_STD
    raise ValueError(f"unknown init scheme {scheme!r}")


def build(preset="desk", seed=0, init=None) -> ModelParams:
    """Zero-mean Gaussian weights (std 0.01, or He scaling) and zero biases.

    ``init`` overrides the preset's scheme.  Layers draw from one seeded
    generator in declaration order, so equal seeds give identical parameters.
    """
    p = get_preset(preset)
    scheme = init or p.init
    rng = np.random.default_rng(seed)
    tensors = {}
    for layer in layer_defs(p):
        tensors[f"{layer.name}.weight"] = Tensor(init_weight(layer, rng, scheme), requires_grad=True)
        tensors[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_dim), requires_grad=True)
    return ModelParams(p, tensors)


def init_weight(layer: LayerDef, rng, scheme="gaussian") -> np.ndarray:
    return rng.normal(0.0, init_std(layer, scheme), size=layer.weight_shape)


def check_input_shape(preset, shape):
    p = get_preset(preset)
    if len(shape) != 4:
        raise ShapeError(f"expected an image batch (N, {p.in_channels}, H, W), got shape {tuple(shape)}")
    n, c, h, w = shape
    if c != p.in_channels:
        raise ShapeError(f"expected {p.in_channels} input channels, got {c}")
    if h % STRIDE or w % STRIDE:
        raise ShapeError(f"image size {h}x{w} must be divisible by {STRIDE}; pad the input")
    th, tw = p.pool_target
    if h // STRIDE < th or w // STRIDE < tw:
        raise ShapeError(
            f"image {h}x{w} gives {h // STRIDE}x{w // STRIDE} features, smaller than the "
            f"classifier pool target {th}x{tw}; increase input size or shrink pool target"
        )


def trace_shapes(preset, input_shape) -> dict:
    """Output shapes of each stage, computed without allocating parameters."""
    p = get_preset(preset)
    check_input_shape(p, input_shape)
    n, _, h, w = input_shape
    fh, fw = h // STRIDE, w // STRIDE
    x1c, x2c = p.x1[-1], p.x2[-1]
    return {
        "frontend": (n, p.frontend[-1], fh, fw),
        "x1": (n, x1c, fh, fw),
        "x2": (n, x2c, fh, fw),
        "concat": (n, x1c + x2c, fh, fw),
        "density": (n, 1, fh, fw),
        "pooled": (n, x2c) + tuple(p.pool_target),
        "logits": (n, p.num_classes),
        "num_pools": len(POOL_AFTER),
        "num_frontend_convs": len(p.frontend),
    }


def _apply(layer, params, x):
    w, b = params[f"{layer.name}.weight"], params[f"{layer.name}.bias"]
    if layer.kind == "conv":
        y = nn.conv2d(x, w, b, dilation=layer.dilation)
    else:
        y = nn.dense(x, w, b)
    return nn.relu(y) if layer.relu else y


def forward(params: ModelParams, image, return_features=False):
    """Return ``(density, logits)``; density is ``(N, 1, H/8, W/8)``, logits ``(N, 10)``."""
    x = image if isinstance(image, Tensor) else Tensor._wrap(np.asarray(image, dtype=np.float64))
    check_input_shape(params.preset, x.shape)
    by_group = {}
    for layer in layer_defs(params.preset):
        by_group.setdefault(layer.group, []).append(layer)

    for i, layer in enumerate(by_group["frontend"]):
        x = _apply(layer, params, x)
        if i in POOL_AFTER:
            x = nn.maxpool2d(x, 2)
    shared = x
    x1 = shared
    for layer in by_group["x1"]:
        x1 = _apply(layer, params, x1)
    x2 = shared
    for layer in by_group["x2"]:
        x2 = _apply(layer, params, x2)

    d = nn.concat_channels(x1, x2)
    concat = d
    for layer in by_group["backend"]:
        d = _apply(layer, params, d)

    z = nn.flatten(nn.adaptive_maxpool2d(x2, params.preset.pool_target))
    for layer in by_group["classifier"]:
        z = _apply(layer, params, z)

    if return_features:
        return d, z, {"frontend": shared, "x1": x1, "x2": x2, "concat": concat}
    return d, z


def save_weights(params: ModelParams, path):
    Path(path).write_bytes(dumps_weights(params.tensors))


def _match_preset(arrays):
    for preset in PRESETS.values():
        shapes = param_shapes(preset)
        if set(shapes) == set(arrays) and all(shapes[k] == arrays[k].shape for k in shapes):
            return preset
    return None


def load_weights(path, params: ModelParams = None, partial=False) -> ModelParams:
    """Read an MTCW file.

    Without ``params`` the preset is inferred from the stored shapes.  With
    ``params`` the stored tensors are copied into it in place; ``partial``
    allows the file to cover only a subset (e.g. the frontend), leaving the
    other tensors untouched.  Unknown names and shape mismatches always fail.
    """
    arrays = loads_weights(Path(path).read_bytes())
    if params is None:
        preset = _match_preset(arrays)
        if preset is None:
            raise WeightMismatchError(unexpected=sorted(arrays))
        return ModelParams(preset, {k: Tensor(arrays[k], requires_grad=True)
                                    for k in param_shapes(preset)})

    missing = [] if partial else [k for k in params if k not in arrays]
    unexpected = [k for k in arrays if k not in params]
    mismatched = [(k, arrays[k].shape, params[k].shape) for k in arrays
                  if k in params and arrays[k].shape != params[k].shape]
    if missing or unexpected or mismatched:
        raise WeightMismatchError(missing, unexpected, mismatched)
    for name, arr in arrays.items():
        params[name].data[...] = arr
    return params
