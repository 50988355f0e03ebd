"""Feed-forward networks: layer specs, initialization, forward pass, model files."""

import copy
import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dense:
    in_dim: int
    out_dim: int


@dataclass(frozen=True)
class Conv2D:
    in_ch: int
    out_ch: int
    kernel: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class FixedAffine:
    """Constant elementwise ``x * scale + shift``.

    ``scale``/``shift`` are scalars or one value per channel (leading axis).
    Used for input standardization; never optimized.
    """
    scale: tuple = (1.0,)
    shift: tuple = (0.0,)


LAYER_TYPES = {cls.__name__: cls for cls in (Dense, Conv2D, ReLU, Flatten, FixedAffine)}
AFFINE = (Dense, Conv2D)


def layer_to_json(layer):
    doc = {"type": type(layer).__name__}
    doc.update({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(layer).items()})
    return doc


def layer_from_json(doc):
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind not in LAYER_TYPES:
        raise ModelFormatError(f"unknown layer type {kind!r}")
    if kind == "FixedAffine":
        doc = {k: tuple(float(v) for v in np.atleast_1d(doc[k])) for k in ("scale", "shift")}
    try:
        return LAYER_TYPES[kind](**doc)
    except TypeError as exc:
        raise ModelFormatError(f"bad {kind} layer fields: {exc}") from None


def output_shape(layer, shape):
    """Shape after ``layer`` for a single-sample input of ``shape``."""
    if isinstance(layer, Dense):
        if shape != (layer.in_dim,):
            raise ValueError(f"Dense expects input ({layer.in_dim},), got {shape}")
        return (layer.out_dim,)
    if isinstance(layer, Conv2D):
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ValueError(f"Conv2D expects ({layer.in_ch}, H, W), got {shape}")
        h = ad.conv_output_size(shape[1], layer.kernel, layer.stride, layer.padding)
        w = ad.conv_output_size(shape[2], layer.kernel, layer.stride, layer.padding)
        if h < 1 or w < 1:
            raise ValueError(f"Conv2D geometry invalid for input {shape}")
        return (layer.out_ch, h, w)
    if isinstance(layer, Flatten):
        return (int(np.prod(shape)),)
    if isinstance(layer, FixedAffine):
        for v in (layer.scale, layer.shift):
            if len(v) not in (1, shape[0]):
                raise ValueError(f"FixedAffine needs 1 or {shape[0]} values, got {len(v)}")
        return shape
    return shape


def infer_shapes(arch, input_shape):
    shapes = [tuple(input_shape)]
    for layer in arch:
        shapes.append(output_shape(layer, shapes[-1]))
    return shapes


def preset(name, input_shape, n_classes):
    """Named reference architectures."""
    input_shape = tuple(input_shape)
    flat = int(np.prod(input_shape))
    if name == "mlp-small":
        return [Flatten(), Dense(flat, 256), ReLU(), Dense(256, 256), ReLU(),
                Dense(256, n_classes)]
    if name == "mlp-tiny":
        return [Flatten(), Dense(flat, 32), ReLU(), Dense(32, 32), ReLU(), Dense(32, n_classes)]
    if name == "lenet-basic":
        c = input_shape[0]
        convs = [Conv2D(c, 16, 4, 2, 1), ReLU(), Conv2D(16, 32, 4, 1, 1), ReLU(), Flatten()]
        feat = infer_shapes(convs, input_shape)[-1][0]
        return convs + [Dense(feat, 100), ReLU(), Dense(100, n_classes)]
    raise ValueError(f"unknown architecture preset {name!r}")


def _affine_layout(layer):
    if isinstance(layer, Dense):
        return (layer.out_dim, layer.in_dim), layer.in_dim, layer.out_dim
    return ((layer.out_ch, layer.in_ch, layer.kernel, layer.kernel),
            layer.in_ch * layer.kernel * layer.kernel, layer.out_ch)


class Network:
    """Ordered layers plus one (weight, bias) pair per Dense/Conv2D layer.

    Dense weights are stored [out, in]; inputs are batched along axis 0.
    """

    def __init__(self, layers, params, input_shape, seed=None):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.shapes = infer_shapes(self.layers, self.input_shape)
        self.params = [tuple(p) if p is not None else None for p in params]
        if len(self.params) != len(self.layers):
            raise ValueError("need one parameter slot per layer")
        for layer, p in zip(self.layers, self.params):
            if isinstance(layer, AFFINE):
                wshape, _, out = _affine_layout(layer)
                if p is None or p[0].shape != wshape or p[1].shape != (out,):
                    raise ValueError(f"parameter shapes do not match {layer}")
            elif p is not None:
                raise ValueError(f"{layer} takes no parameters")
        if not isinstance(self.layers[-1], Dense):
            raise ValueError("the final layer must be Dense")
        if self.n_classes < 2:
            raise ValueError("output dimension must be at least 2")

    @property
    def n_classes(self):
        return self.layers[-1].out_dim

    def parameters(self):
        return [t for p in self.params if p is not None for t in p]

    def copy(self):
        params = [None if p is None else tuple(ad.Tensor(t.data.copy(), True) for t in p)
                  for p in self.params]
        return Network(self.layers, params, self.input_shape, self.seed)

    def _batched(self, x):
        x = x.data if isinstance(x, ad.Tensor) else np.asarray(x, dtype=np.float64)
        if x.shape == self.input_shape:
            return x[None], True
        if x.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {x.shape} does not match {self.input_shape}")
        return x, False

    def apply_layer(self, i, h):
        """Run layer ``i`` on the batched tensor ``h``."""
        layer, p = self.layers[i], self.params[i]
        if isinstance(layer, Dense):
            return ad.matmul(h, ad.transpose(p[0])) + p[1]
        if isinstance(layer, Conv2D):
            return ad.conv2d(h, p[0], p[1], layer.stride, layer.padding)
        if isinstance(layer, ReLU):
            return ad.relu(h)
        if isinstance(layer, Flatten):
            return ad.reshape(h, (h.shape[0], -1))
        if isinstance(layer, FixedAffine):
            scale, shift = fixed_affine_arrays(layer, h.ndim)
            return h * scale + shift
        raise TypeError(layer)

    def forward(self, x, upto=None):
        """Logits as a Tensor: [n_classes] for one sample, [B, n_classes] for a batch."""
        xb, single = self._batched(x)
        h = ad.Tensor(xb)
        for i in range(len(self.layers) if upto is None else upto):
            h = self.apply_layer(i, h)
        return ad.reshape(h, h.shape[1:]) if single else h

    def logits(self, x):
        return self.forward(x).data

    def predict(self, x):
        return np.argmax(self.logits(x), axis=-1)

    __call__ = logits


def fixed_affine_arrays(layer, ndim):
    """Scale/shift broadcastable against a batched activation of ``ndim`` dims."""
    shape = (-1,) + (1,) * (ndim - 2)
    scale = np.asarray(layer.scale, dtype=np.float64)
    shift = np.asarray(layer.shift, dtype=np.float64)
    return scale.reshape(shape), shift.reshape(shape)


def init(arch, seed, input_shape=None):
    """He-uniform weights (bound sqrt(6 / fan_in)), zero biases."""
    arch = list(arch)
    if input_shape is None:
        first = next((l for l in arch if isinstance(l, AFFINE)), None)
        if not isinstance(first, Dense) or not all(
                isinstance(l, (Flatten, FixedAffine, ReLU)) for l in arch[:arch.index(first)]):
            raise ValueError("input_shape is required unless the network starts with Dense")
        input_shape = (first.in_dim,)
    infer_shapes(arch, input_shape)
    rng = np.random.default_rng(seed)
    params = []
    for layer in arch:
        if isinstance(layer, AFFINE):
            wshape, fan_in, out = _affine_layout(layer)
            bound = math.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=wshape)
            params.append((ad.Tensor(w, True), ad.Tensor(np.zeros(out), True)))
        else:
            params.append(None)
    return Network(arch, params, input_shape, seed)


def clone_for_head(base, new_out_dim, seed=None):
    """Copy every layer of ``base`` and re-initialize a fresh final Dense head."""
    last = base.layers[-1]
    if not isinstance(last, Dense):
        raise ValueError("base network must end in a Dense layer")
    head = Dense(last.in_dim, new_out_dim)
    seed = base.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    bound = math.sqrt(6.0 / head.in_dim)
    w = rng.uniform(-bound, bound, size=(new_out_dim, head.in_dim))
    params = [None if p is None else tuple(ad.Tensor(t.data.copy(), True) for t in p)
              for p in base.params[:-1]]
    params.append((ad.Tensor(w, True), ad.Tensor(np.zeros(new_out_dim), True)))
    return Network(base.layers[:-1] + [head], params, base.input_shape, seed)


def with_output_dim(arch, n_out):
    arch = list(arch)
    if not isinstance(arch[-1], Dense):
        raise ValueError("architecture must end in a Dense layer")
    arch[-1] = Dense(arch[-1].in_dim, n_out)
    return arch


# -- model files ----------------------------------------------------------

def _encode(a):
    return a.astype(">f8").tobytes().hex()


def _decode(text, shape):
    raw = bytes.fromhex(text)
    if len(raw) != 8 * int(np.prod(shape)):
        raise ModelFormatError(f"parameter payload does not match shape {shape}")
    return np.frombuffer(raw, dtype=">f8").astype(np.float64).reshape(shape)


def to_json(net):
    params = []
    for i, p in enumerate(net.params):
        if p is None:
            continue
        for name, t in zip(("weight", "bias"), p):
            params.append({"layer": i, "name": name, "shape": list(t.shape),
                           "hex": _encode(t.data)})
    return {"format_version": FORMAT_VERSION,
            "architecture": [layer_to_json(l) for l in net.layers],
            "input_shape": list(net.input_shape),
            "n_classes": net.n_classes,
            "seed": net.seed,
            "params": params}


def from_json(doc):
    try:
        if doc.get("format_version") != FORMAT_VERSION:
            raise ModelFormatError(f"unsupported format_version {doc.get('format_version')!r}")
        layers = [layer_from_json(l) for l in doc["architecture"]]
        input_shape = tuple(int(v) for v in doc["input_shape"])
        shapes = infer_shapes(layers, input_shape)
        if doc["n_classes"] != shapes[-1][0]:
            raise ModelFormatError("n_classes does not match the architecture")
        slots = {}
        for entry in doc["params"]:
            slots[(entry["layer"], entry["name"])] = entry
        params = []
        for i, layer in enumerate(layers):
            if not isinstance(layer, AFFINE):
                params.append(None)
                continue
            wshape, _, out = _affine_layout(layer)
            pair = []
            for name, expect in (("weight", wshape), ("bias", (out,))):
                entry = slots.pop((i, name), None)
                if entry is None:
                    raise ModelFormatError(f"missing {name} for layer {i}")
                if tuple(entry["shape"]) != tuple(expect):
                    raise ModelFormatError(
                        f"layer {i} {name}: shape {entry['shape']} but architecture "
                        f"needs {list(expect)}")
                pair.append(ad.Tensor(_decode(entry["hex"], expect), True))
            params.append(tuple(pair))
        if slots:
            raise ModelFormatError(f"unexpected parameters {sorted(slots)}")
        return Network(layers, params, input_shape, doc.get("seed"))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed model document: {exc!r}") from None
    except ValueError as exc:
        if isinstance(exc, ModelFormatError):
            raise
        raise ModelFormatError(str(exc)) from None


def save(net, path):
    with open(path, "w") as fh:
        json.dump(to_json(net), fh, indent=1)
        fh.write("\n")


def load(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not JSON ({exc})") from None
    return from_json(doc)


def snapshot(net):
    """Deep copy of parameter arrays (for bit-equality checks)."""
    return [copy.deepcopy(t.data) for t in net.parameters()]
