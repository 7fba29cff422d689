"""Dense reference network: layer definitions, forward/backward passes, masked SGD.

Everything here works on plain numpy arrays. Weights are float32 unless a
model is explicitly cast (the gradient checks run in float64).
"""
from __future__ import annotations

import io
import json
import math
import zipfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ACTIVATIONS = ("none", "relu")
POOL_KINDS = ("max", "avg")


class ShapeError(ValueError):
    """Raised when a tensor does not fit the layer it is fed to."""


@dataclass(frozen=True)
class Conv:
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    stride: int = 1
    activation: str = "relu"

    type = "conv"


@dataclass(frozen=True)
class Pool:
    kind: str = "max"
    size: int = 2

    type = "pool"


@dataclass(frozen=True)
class FC:
    """Fully connected layer with an ``m x n`` weight (``m`` outputs, ``n`` inputs).

    The weight is tiled into ``block_x x block_y`` blocks; each block is one
    prunable unit, the same way a conv kernel is.
    """

    m: int
    n: int
    block_x: int = 1
    block_y: int = 1
    activation: str = "none"

    type = "fc"


LayerDef = Union[Conv, Pool, FC]
_LAYER_TYPES = {"conv": Conv, "pool": Pool, "fc": FC}


def is_weighted(layer: LayerDef) -> bool:
    return isinstance(layer, (Conv, FC))


def kernel_shape(layer: LayerDef) -> tuple[int, int]:
    """Shape of one prunable unit: the conv kernel or the FC block."""
    if isinstance(layer, Conv):
        return (layer.kh, layer.kw)
    if isinstance(layer, FC):
        return (layer.block_x, layer.block_y)
    raise TypeError(f"{type(layer).__name__} has no kernels")


def kernel_count(layer: LayerDef) -> int:
    if isinstance(layer, Conv):
        return layer.out_ch * layer.in_ch
    if isinstance(layer, FC):
        return (layer.m // layer.block_x) * (layer.n // layer.block_y)
    return 0


def weight_shape(layer: LayerDef) -> tuple[int, ...]:
    if isinstance(layer, Conv):
        return (layer.out_ch, layer.in_ch, layer.kh, layer.kw)
    if isinstance(layer, FC):
        return (layer.m, layer.n)
    raise TypeError(f"{type(layer).__name__} has no weights")


def out_units(layer: LayerDef) -> int:
    """Length of the bias vector."""
    return layer.out_ch if isinstance(layer, Conv) else layer.m


def to_kernels(layer: LayerDef, w: np.ndarray) -> np.ndarray:
    """Split a weight tensor into ``(kernel_count, x, y)`` in canonical order.

    Conv kernels are ordered (out_ch, in_ch); FC blocks row-major over the
    block grid.
    """
    if isinstance(layer, Conv):
        return w.reshape(layer.out_ch * layer.in_ch, layer.kh, layer.kw)
    bx, by = layer.block_x, layer.block_y
    gm, gn = layer.m // bx, layer.n // by
    return w.reshape(gm, bx, gn, by).transpose(0, 2, 1, 3).reshape(gm * gn, bx, by)


def from_kernels(layer: LayerDef, kernels: np.ndarray) -> np.ndarray:
    if isinstance(layer, Conv):
        return kernels.reshape(layer.out_ch, layer.in_ch, layer.kh, layer.kw)
    bx, by = layer.block_x, layer.block_y
    gm, gn = layer.m // bx, layer.n // by
    return kernels.reshape(gm, gn, bx, by).transpose(0, 2, 1, 3).reshape(layer.m, layer.n)


@dataclass(frozen=True)
class NetworkDef:
    input_shape: tuple[int, ...]
    layers: tuple[LayerDef, ...]

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "layers", tuple(self.layers))
        self.shapes()

    def shapes(self) -> list[tuple[int, ...]]:
        """Input shape of every layer followed by the network output shape."""
        shape = self.input_shape
        out = [shape]
        for i, layer in enumerate(self.layers):
            shape = _out_shape(i, layer, shape)
            out.append(shape)
        return out

    @property
    def num_classes(self) -> int:
        return int(np.prod(self.shapes()[-1]))

    def weighted_layers(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if is_weighted(layer)]

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {"type": layer.type}
            d.update(asdict(layer))
            layers.append(d)
        return {"input_shape": list(self.input_shape), "layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkDef":
        layers = []
        for i, spec in enumerate(d["layers"]):
            spec = dict(spec)
            kind = spec.pop("type", None)
            if kind not in _LAYER_TYPES:
                raise ValueError(f"layer {i}: unknown layer type {kind!r}")
            layers.append(_LAYER_TYPES[kind](**spec))
        return cls(tuple(d["input_shape"]), tuple(layers))


def _out_shape(i: int, layer: LayerDef, shape: tuple[int, ...]) -> tuple[int, ...]:
    if isinstance(layer, Conv):
        if layer.activation not in ACTIVATIONS:
            raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
        if len(shape) != 3 or shape[0] != layer.in_ch:
            raise ShapeError(f"layer {i}: conv expects ({layer.in_ch}, H, W) input, got {shape}")
        c, h, w = shape
        if h < layer.kh or w < layer.kw or layer.stride < 1:
            raise ShapeError(f"layer {i}: kernel {layer.kh}x{layer.kw} does not fit input {shape}")
        return (layer.out_ch, (h - layer.kh) // layer.stride + 1, (w - layer.kw) // layer.stride + 1)
    if isinstance(layer, Pool):
        if layer.kind not in POOL_KINDS:
            raise ShapeError(f"layer {i}: unknown pool kind {layer.kind!r}")
        if len(shape) != 3 or shape[1] < layer.size or shape[2] < layer.size:
            raise ShapeError(f"layer {i}: pool of size {layer.size} does not fit input {shape}")
        return (shape[0], shape[1] // layer.size, shape[2] // layer.size)
    if isinstance(layer, FC):
        if layer.activation not in ACTIVATIONS:
            raise ShapeError(f"layer {i}: unknown activation {layer.activation!r}")
        if layer.m % layer.block_x or layer.n % layer.block_y:
            raise ShapeError(
                f"layer {i}: {layer.block_x}x{layer.block_y} blocks do not tile a {layer.m}x{layer.n} weight"
            )
        if int(np.prod(shape)) != layer.n:
            raise ShapeError(f"layer {i}: fc expects {layer.n} inputs, got shape {shape}")
        return (layer.m,)
    raise TypeError(f"layer {i}: unsupported layer {layer!r}")


def mac_count(layer: LayerDef, in_shape: Sequence[int]) -> int:
    """Dense multiply-accumulate count; for pooling, the number of compared/summed inputs."""
    out = _out_shape(0, layer, tuple(in_shape))
    if isinstance(layer, Conv):
        return out[0] * out[1] * out[2] * layer.in_ch * layer.kh * layer.kw
    if isinstance(layer, FC):
        return layer.m * layer.n
    return out[0] * out[1] * out[2] * layer.size * layer.size


def load_network(path: Union[str, Path]) -> NetworkDef:
    """Read a network definition from JSON.

    Schema::

        {"input_shape": [C, H, W],
         "layers": [{"type": "conv", "in_ch": 1, "out_ch": 8, "kh": 3, "kw": 3,
                     "stride": 1, "activation": "relu"},
                    {"type": "pool", "kind": "max", "size": 2},
                    {"type": "fc", "m": 24, "n": 300, "block_x": 3, "block_y": 3,
                     "activation": "relu"}]}
    """
    with open(path) as fh:
        return NetworkDef.from_dict(json.load(fh))


def save_network(net: NetworkDef, path: Union[str, Path]) -> None:
    with open(path, "w") as fh:
        json.dump(net.to_dict(), fh, indent=2)


def toy_network(num_classes: int = 4, input_hw: int = 16) -> NetworkDef:
    """Small LeNet-style net; conv kernels and the hidden FC use 3x3 prunable units.

    The classifier layer is one whole-matrix block, so a 3x3 pattern library
    leaves it dense.
    """
    h = (input_hw - 2) // 2 - 2
    return NetworkDef(
        (1, input_hw, input_hw),
        (
            Conv(1, 8, 3, 3, 1, "relu"),
            Pool("max", 2),
            Conv(8, 12, 3, 3, 1, "relu"),
            FC(24, 12 * h * h, 3, 3, "relu"),
            FC(num_classes, 24, num_classes, 24, "none"),
        ),
    )


@dataclass
class TrainedModel:
    net: NetworkDef
    weights: list[Optional[np.ndarray]]
    biases: list[Optional[np.ndarray]]
    masks: list[Optional[np.ndarray]]

    def copy(self) -> "TrainedModel":
        dup = lambda xs: [None if x is None else x.copy() for x in xs]
        return TrainedModel(self.net, dup(self.weights), dup(self.biases), dup(self.masks))

    def astype(self, dtype) -> "TrainedModel":
        cast = lambda xs: [None if x is None else x.astype(dtype) for x in xs]
        return TrainedModel(self.net, cast(self.weights), cast(self.biases), [None if m is None else m.copy() for m in self.masks])

    def kept_count(self, layers: Optional[Sequence[int]] = None) -> int:
        layers = self.net.weighted_layers() if layers is None else layers
        return int(sum(self.masks[i].sum() for i in layers))


def init_model(net: NetworkDef, seed: int = 0, dtype=np.float32) -> TrainedModel:
    """He-normal weights, zero biases, all-ones masks."""
    rng = np.random.default_rng(seed)
    weights, biases, masks = [], [], []
    for layer in net.layers:
        if not is_weighted(layer):
            weights.append(None)
            biases.append(None)
            masks.append(None)
            continue
        shape = weight_shape(layer)
        fan_in = int(np.prod(shape[1:]))
        weights.append((rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype))
        biases.append(np.zeros(out_units(layer), dtype=dtype))
        masks.append(np.ones(shape, dtype=bool))
    return TrainedModel(net, weights, biases, masks)


def _as_batch(net: NetworkDef, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.shape == net.input_shape:
        return x[None]
    if x.ndim == len(net.input_shape) + 1 and x.shape[1:] == net.input_shape:
        return x
    raise ShapeError(f"layer 0: expected input of shape {net.input_shape}, got {x.shape}")


def _forward(model: TrainedModel, x: np.ndarray, keep: bool):
    net = model.net
    a = x
    caches = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv):
            if a.ndim != 4 or a.shape[1] != layer.in_ch:
                raise ShapeError(f"layer {i}: conv expects {layer.in_ch} channels, got {a.shape[1:]}")
            s = layer.stride
            win = sliding_window_view(a, (layer.kh, layer.kw), axis=(2, 3))[:, :, ::s, ::s]
            b_, c_, oh, ow = win.shape[:4]
            cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(b_ * oh * ow, -1)
            wmat = model.weights[i].reshape(layer.out_ch, -1)
            z = cols @ wmat.T + model.biases[i]
            z = z.reshape(b_, oh, ow, layer.out_ch).transpose(0, 3, 1, 2)
            cache = (a.shape, cols, (oh, ow)) if keep else None
        elif isinstance(layer, Pool):
            if a.ndim != 4:
                raise ShapeError(f"layer {i}: pool expects (C, H, W) input, got {a.shape[1:]}")
            k = layer.size
            b_, c_, h, w = a.shape
            oh, ow = h // k, w // k
            blocks = a[:, :, : oh * k, : ow * k].reshape(b_, c_, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(b_, c_, oh, ow, k * k)
            if layer.kind == "max":
                idx = blocks.argmax(axis=-1)
                z = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
            else:
                idx = None
                z = blocks.mean(axis=-1)
            cache = (a.shape, idx) if keep else None
        else:
            flat = a.reshape(a.shape[0], -1)
            if flat.shape[1] != layer.n:
                raise ShapeError(f"layer {i}: fc expects {layer.n} inputs, got {flat.shape[1]}")
            z = flat @ model.weights[i].T + model.biases[i]
            cache = (a.shape, flat) if keep else None
        act = getattr(layer, "activation", "none")
        if act == "relu":
            z = np.maximum(z, 0)
        caches.append((cache, z if (keep and act == "relu") else None))
        a = z
    return a, caches


def forward(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Class scores for one input ``(C, H, W)`` or a batch ``(B, C, H, W)``."""
    x = np.asarray(x)
    single = x.shape == model.net.input_shape
    out, _ = _forward(model, _as_batch(model.net, x), keep=False)
    out = out.reshape(out.shape[0], -1)
    return out[0] if single else out


def predict(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. ties go to the lowest class index
    return forward(model, _as_batch(model.net, x)).argmax(axis=1)


@dataclass
class Gradients:
    weights: list[Optional[np.ndarray]]
    biases: list[Optional[np.ndarray]]


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(model: TrainedModel, x: np.ndarray, y: np.ndarray) -> tuple[float, Gradients]:
    """Mean softmax cross-entropy over the batch and its gradients.

    Weight gradients are dense; masking happens in :func:`sgd_step_masked`.
    """
    x = _as_batch(model.net, x)
    y = np.asarray(y, dtype=np.int64).reshape(-1)
    if x.shape[0] == 0 or y.shape[0] != x.shape[0]:
        raise ValueError("loss_and_grads needs a nonempty batch with one label per sample")
    scores, caches = _forward(model, x, keep=True)
    scores = scores.reshape(scores.shape[0], -1)
    n = scores.shape[0]
    probs = _softmax(scores)
    shifted = scores - scores.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-logp[np.arange(n), y].mean())

    gw: list = [None] * len(model.net.layers)
    gb: list = [None] * len(model.net.layers)
    d = probs
    d[np.arange(n), y] -= 1.0
    d = d / n
    for i in reversed(range(len(model.net.layers))):
        layer = model.net.layers[i]
        cache, act_out = caches[i]
        if act_out is not None:
            d = d.reshape(act_out.shape) * (act_out > 0)
        if isinstance(layer, FC):
            in_shape, flat = cache
            d = d.reshape(n, layer.m)
            gw[i] = d.T @ flat
            gb[i] = d.sum(axis=0)
            d = (d @ model.weights[i]).reshape(in_shape)
        elif isinstance(layer, Conv):
            in_shape, cols, (oh, ow) = cache
            dz = d.transpose(0, 2, 3, 1).reshape(-1, layer.out_ch)
            gw[i] = (dz.T @ cols).reshape(model.weights[i].shape)
            gb[i] = dz.sum(axis=0)
            dcols = (dz @ model.weights[i].reshape(layer.out_ch, -1)).reshape(n, oh, ow, layer.in_ch, layer.kh, layer.kw)
            dx = np.zeros(in_shape, dtype=dcols.dtype)
            s = layer.stride
            for r in range(layer.kh):
                for c in range(layer.kw):
                    dx[:, :, r : r + s * oh : s, c : c + s * ow : s] += dcols[:, :, :, :, r, c].transpose(0, 3, 1, 2)
            d = dx
        else:
            in_shape, idx = cache
            k = layer.size
            b_, c_, h, w = in_shape
            oh, ow = h // k, w // k
            if layer.kind == "max":
                spread = np.zeros((b_, c_, oh, ow, k * k), dtype=d.dtype)
                np.put_along_axis(spread, idx[..., None], d[..., None], axis=-1)
            else:
                spread = np.repeat(d[..., None] / (k * k), k * k, axis=-1)
            spread = spread.reshape(b_, c_, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(b_, c_, oh * k, ow * k)
            dx = np.zeros(in_shape, dtype=d.dtype)
            dx[:, :, : oh * k, : ow * k] = spread
            d = dx
    return loss, Gradients(gw, gb)


def sgd_step_masked(
    model: TrainedModel,
    grads: Gradients,
    lr: float,
    frozen_masks: Optional[Sequence[Optional[np.ndarray]]] = None,
) -> TrainedModel:
    """One plain SGD step restricted to kept, unfrozen weights.

    A bias is trainable when at least one weight feeding its unit is; a unit
    whose whole fan-in is pruned or frozen keeps its bias as well.
    """
    new = model.copy()
    for i, layer in enumerate(model.net.layers):
        if not is_weighted(layer):
            continue
        g, gb = grads.weights[i], grads.biases[i]
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(gb))):
            raise FloatingPointError(f"layer {i}: non-finite gradient")
        frozen = None if frozen_masks is None else frozen_masks[i]
        if frozen is not None and frozen.shape != g.shape:
            raise ShapeError(f"layer {i}: frozen mask shape {frozen.shape} != weight shape {g.shape}")
        trainable = model.masks[i] if frozen is None else (model.masks[i] & ~frozen.astype(bool))
        w = model.weights[i]
        new.weights[i] = np.where(trainable, w - lr * g, w).astype(w.dtype)
        unit_live = trainable.reshape(trainable.shape[0], -1).any(axis=1)
        b = model.biases[i]
        new.biases[i] = np.where(unit_live, b - lr * gb, b).astype(b.dtype)
    return new


def evaluate_accuracy(model: TrainedModel, x: np.ndarray, y: np.ndarray) -> float:
    """Fraction of argmax-correct predictions."""
    y = np.asarray(y).reshape(-1)
    if y.size == 0:
        raise ValueError("holdout set is empty")
    return float(np.mean(predict(model, x) == y))


def train_epochs(
    model: TrainedModel,
    x: np.ndarray,
    y: np.ndarray,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
    frozen_masks=None,
) -> tuple[TrainedModel, list[float]]:
    """Shuffled mini-batch SGD; returns the model and the mean loss of each epoch."""
    losses = []
    n = len(y)
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            loss, grads = loss_and_grads(model, x[idx], y[idx])
            if not math.isfinite(loss):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            model = sgd_step_masked(model, grads, lr, frozen_masks)
            total += loss * len(idx)
        losses.append(total / n)
    return model, losses


@dataclass
class Dataset:
    x_train: np.ndarray
    y_train: np.ndarray
    x_holdout: np.ndarray
    y_holdout: np.ndarray
    num_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("y_train", "y_holdout"):
            y = getattr(self, name)
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ValueError(f"{name} has labels outside [0, {self.num_classes})")


def make_synthetic_dataset(
    seed: int,
    num_classes: int,
    samples_per_class: int,
    image_shape: tuple[int, int, int] = (1, 16, 16),
    holdout_fraction: float = 0.25,
    noise: float = 0.35,
    jitter: float = 1.0,
) -> Dataset:
    """Gaussian-blob images; each class has its own blob centre.

    Every sample is the class blob with its centre jittered by ``jitter``
    pixels, plus i.i.d. pixel noise. The holdout split is stratified.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    rng = np.random.default_rng(seed)
    c, h, w = image_shape
    margin = 3.0
    centres = []
    while len(centres) < num_classes:
        cand = rng.uniform(margin, [h - 1 - margin, w - 1 - margin])
        if all(np.hypot(*(cand - p)) >= 3.5 for p in centres):
            centres.append(cand)
    yy, xx = np.mgrid[0:h, 0:w]
    n_hold = max(1, int(round(samples_per_class * holdout_fraction)))
    xs_tr, ys_tr, xs_ho, ys_ho = [], [], [], []
    for k, (cy, cx) in enumerate(centres):
        off = rng.normal(0.0, jitter, size=(samples_per_class, 2))
        ampl = rng.uniform(0.8, 1.2, size=(samples_per_class, c))
        py = (cy + off[:, 0])[:, None, None]
        px = (cx + off[:, 1])[:, None, None]
        blob = np.exp(-((yy - py) ** 2 + (xx - px) ** 2) / (2 * 1.8**2))
        imgs = ampl[:, :, None, None] * blob[:, None] + rng.normal(0.0, noise, size=(samples_per_class, c, h, w))
        imgs = imgs.astype(np.float32)
        xs_ho.append(imgs[:n_hold])
        xs_tr.append(imgs[n_hold:])
        ys_ho.append(np.full(n_hold, k))
        ys_tr.append(np.full(samples_per_class - n_hold, k))
    return Dataset(
        np.concatenate(xs_tr),
        np.concatenate(ys_tr).astype(np.int64),
        np.concatenate(xs_ho),
        np.concatenate(ys_ho).astype(np.int64),
        num_classes,
        {"source": "synthetic", "seed": seed},
    )


_IDX_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path: Union[str, Path]) -> np.ndarray:
    """Read an IDX file (the MNIST distribution format, big-endian)."""
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _IDX_DTYPES:
        raise ValueError(f"{path}: unknown IDX element type 0x{code:02x}")
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(int)
    dtype = np.dtype(_IDX_DTYPES[code])
    count = int(np.prod(dims))
    offset = 4 + 4 * ndim
    if len(raw) < offset + count * dtype.itemsize:
        raise ValueError(f"{path}: truncated IDX payload")
    return np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(dims)


def load_idx_dataset(
    images_path: Union[str, Path],
    labels_path: Union[str, Path],
    holdout_fraction: float = 0.2,
    seed: int = 0,
    limit: Optional[int] = None,
) -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    if images.ndim != 3 or labels.ndim != 1 or len(images) != len(labels):
        raise ValueError("expected (N, H, W) images and (N,) labels")
    x = (images.astype(np.float32) / 255.0)[:, None]
    if limit is not None:
        x, labels = x[:limit], labels[:limit]
    order = np.random.default_rng(seed).permutation(len(labels))
    n_hold = int(round(len(labels) * holdout_fraction))
    ho, tr = order[:n_hold], order[n_hold:]
    return Dataset(x[tr], labels[tr], x[ho], labels[ho], int(labels.max()) + 1, {"source": str(images_path)})


def save_models(path: Union[str, Path], models: Sequence[TrainedModel]) -> None:
    """Store a list of models sharing one network in an ``.npz`` archive."""
    arrays = {"net": np.frombuffer(json.dumps(models[0].net.to_dict()).encode(), dtype=np.uint8)}
    for k, model in enumerate(models):
        for i in model.net.weighted_layers():
            arrays[f"w{k}_{i}"] = model.weights[i]
            arrays[f"b{k}_{i}"] = model.biases[i]
            arrays[f"m{k}_{i}"] = model.masks[i]
    arrays["n_models"] = np.array(len(models))
    # fixed member timestamps keep the archive byte-identical across runs
    with zipfile.ZipFile(path, "w", zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.asarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            info.compress_type = zipfile.ZIP_DEFLATED
            zf.writestr(info, buf.getvalue())


def load_models(path: Union[str, Path]) -> list[TrainedModel]:
    with np.load(path) as f:
        net = NetworkDef.from_dict(json.loads(f["net"].tobytes().decode()))
        models = []
        for k in range(int(f["n_models"])):
            w, b, m = [None] * len(net.layers), [None] * len(net.layers), [None] * len(net.layers)
            for i in net.weighted_layers():
                w[i], b[i], m[i] = f[f"w{k}_{i}"], f[f"b{k}_{i}"], f[f"m{k}_{i}"].astype(bool)
            models.append(TrainedModel(net, w, b, m))
    return models
