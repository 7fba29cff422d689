"""Shared-weight model bundles: compression, run-time extraction, condensed execution.

A bundle stores, per prunable layer, the distinct kernel patterns used by
any model, an ``(kernels, models)`` table of pattern ids, and one flat
payload holding each kernel's values at the union of its models' patterns
(row-major kernel order, row-major position order). Extracting a model
walks the payload with that model's pattern and the others' patterns.
"""
from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .patterns import Pattern, union_patterns
from .tensor_nn import (
    FC,
    Conv,
    LayerDef,
    NetworkDef,
    Pool,
    ShapeError,
    TrainedModel,
    from_kernels,
    is_weighted,
    kernel_count,
    kernel_shape,
    out_units,
    to_kernels,
)
from .shared_training import first_sharing_violation

MAGIC = b"SWM1"
VERSION = 1


class SwmFormatError(ValueError):
    pass


class BadMagicError(SwmFormatError):
    pass


class ChecksumError(SwmFormatError):
    pass


class VersionError(SwmFormatError):
    pass


class TruncatedError(SwmFormatError):
    pass


class SharingViolation(ValueError):
    pass


@dataclass(eq=False)
class BundleLayer:
    layer: LayerDef
    patterns: list[Pattern] = field(default_factory=list)
    location: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.uint8))
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.uint32))
    payload: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.float32))
    biases: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.float32))

    @property
    def weighted(self) -> bool:
        return is_weighted(self.layer)

    def union_counts(self) -> np.ndarray:
        """Payload segment length of every kernel."""
        if not self.patterns:
            return np.zeros(len(self.location), dtype=np.int64)
        stack = np.stack([np.array(p.bits, dtype=bool) for p in self.patterns])
        return stack[self.location].any(axis=1).sum(axis=1)

    def segment(self, kernel: int) -> np.ndarray:
        start = int(self.offsets[kernel])
        end = int(self.offsets[kernel + 1]) if kernel + 1 < len(self.offsets) else len(self.payload)
        return self.payload[start:end]

    def kernel_patterns(self, kernel: int, model: int) -> tuple[Pattern, list[Pattern]]:
        """``(P_D, P_O)`` for one kernel: the model's pattern and every other model's."""
        ids = self.location[kernel]
        return self.patterns[ids[model]], [self.patterns[ids[j]] for j in range(len(ids)) if j != model]

    def equals(self, other: "BundleLayer") -> bool:
        return (
            self.layer == other.layer
            and self.patterns == other.patterns
            and np.array_equal(self.location, other.location)
            and np.array_equal(self.offsets, other.offsets)
            and self.payload.tobytes() == other.payload.tobytes()
            and self.biases.tobytes() == other.biases.tobytes()
        )


@dataclass(eq=False)
class SwmBundle:
    num_models: int
    input_shape: tuple[int, ...]
    layers: list[BundleLayer]

    def __eq__(self, other) -> bool:
        if not isinstance(other, SwmBundle):
            return NotImplemented
        return (
            self.num_models == other.num_models
            and tuple(self.input_shape) == tuple(other.input_shape)
            and len(self.layers) == len(other.layers)
            and all(a.equals(b) for a, b in zip(self.layers, other.layers))
        )

    @property
    def net(self) -> NetworkDef:
        return NetworkDef(self.input_shape, tuple(l.layer for l in self.layers))

    def payload_size(self) -> int:
        return sum(len(l.payload) for l in self.layers)

    def kept_count(self, model: int) -> int:
        total = 0
        for l in self.layers:
            if l.weighted:
                pops = np.array([p.popcount for p in l.patterns])
                total += int(pops[l.location[:, model]].sum())
        return total


@dataclass
class CondensedKernel:
    pattern: Pattern
    values: np.ndarray

    def __post_init__(self):
        if len(self.values) != self.pattern.popcount:
            raise ValueError(f"{len(self.values)} values for a pattern keeping {self.pattern.popcount}")


def compress(models: Sequence[TrainedModel]) -> SwmBundle:
    """Pack shared-weight models into one bundle.

    Each model's per-kernel pattern is read from its mask. Every position in
    the union is stored once; models covering it must agree bit-exactly.
    """
    if not models:
        raise ValueError("nothing to compress")
    net = models[0].net
    if any(m.net != net for m in models):
        raise ValueError("models do not share one network definition")
    if len(models) > 255:
        raise ValueError("at most 255 models per bundle")
    bad = first_sharing_violation(models)
    if bad is not None:
        i, j, layer, flat = bad
        pos = np.unravel_index(flat, models[i].weights[layer].shape)
        raise SharingViolation(f"models {i} and {j} disagree at layer {layer}, position {tuple(int(p) for p in pos)}")

    n = len(models)
    out = []
    for li, layer in enumerate(net.layers):
        if not is_weighted(layer):
            out.append(BundleLayer(layer))
            continue
        kx, ky = kernel_shape(layer)
        masks = np.stack([to_kernels(layer, m.masks[li]).reshape(-1, kx * ky) for m in models])  # (N, K, P)
        vals = np.stack([to_kernels(layer, m.weights[li]).reshape(-1, kx * ky) for m in models]).astype(np.float32)
        if not masks.any(axis=2).all():
            k, kern = np.argwhere(~masks.any(axis=2))[0]
            raise ValueError(f"model {k}, layer {li}, kernel {kern}: every pattern must keep at least one weight")
        union = masks.any(axis=0)
        first = masks.argmax(axis=0)  # first model covering each position
        merged = np.take_along_axis(vals, first[None], axis=0)[0]
        payload = merged[union]
        counts = union.sum(axis=1)
        offsets = np.concatenate([[0], np.cumsum(counts)[:-1]]).astype(np.uint32)

        lookup: dict[bytes, int] = {}
        patterns: list[Pattern] = []
        location = np.zeros((masks.shape[1], n), dtype=np.uint8)
        for kern in range(masks.shape[1]):
            for k in range(n):
                key = masks[k, kern].tobytes()
                if key not in lookup:
                    if len(patterns) == 255:
                        raise ValueError(f"layer {li}: more than 255 distinct patterns")
                    lookup[key] = len(patterns)
                    patterns.append(Pattern((kx, ky), tuple(masks[k, kern].tolist()), len(patterns)))
                location[kern, k] = lookup[key]
        biases = np.stack([m.biases[li] for m in models]).astype(np.float32)
        out.append(BundleLayer(layer, patterns, location, offsets, payload.astype(np.float32), biases))
    return SwmBundle(n, net.input_shape, out)


def extract_with_trace(ws: np.ndarray, pd: Pattern, po: Sequence[Pattern]):
    """Weight extraction with step accounting.

    Positions are walked row-major with a source cursor into ``ws``:
    ``take`` when the desired pattern keeps the position, ``skip`` (cursor
    advances, nothing taken) when only another model keeps it, ``nothing``
    otherwise. Returns ``(CondensedKernel, steps, checks)`` where ``checks``
    counts inspections of other-model bits.
    """
    others = list(po)
    if others:
        covered = union_patterns([pd] + others)
    else:
        covered = pd
    if len(ws) != covered.popcount:
        raise ValueError(f"payload segment has {len(ws)} values, patterns cover {covered.popcount}")
    out = np.empty(pd.popcount, dtype=np.asarray(ws).dtype)
    steps: list[str] = []
    checks = 0
    i = j = 0
    for pos, bit in enumerate(pd.bits):
        if bit:
            out[j] = ws[i]
            i += 1
            j += 1
            steps.append("take")
            continue
        for other in others:
            checks += 1
            if other.bits[pos]:
                i += 1
                steps.append("skip")
                break
        else:
            steps.append("nothing")
    return CondensedKernel(pd, out), steps, checks


def extract(ws: np.ndarray, pd: Pattern, po: Sequence[Pattern] = ()) -> CondensedKernel:
    return extract_with_trace(ws, pd, po)[0]


def extract_model(bundle: SwmBundle, model: int) -> list[Optional[list[CondensedKernel]]]:
    """Condensed kernels of one model for every layer (None for pooling layers)."""
    _check_model(bundle, model)
    out = []
    for l in bundle.layers:
        if not l.weighted:
            out.append(None)
            continue
        kernels = []
        for kern in range(len(l.location)):
            pd, po = l.kernel_patterns(kern, model)
            kernels.append(extract(l.segment(kern), pd, po))
        out.append(kernels)
    return out


def extraction_ops(bundle: SwmBundle, model: int) -> dict[str, int]:
    """Operation counts of extracting one model: steps by kind, other-pattern checks, id reads."""
    _check_model(bundle, model)
    counts = {"take": 0, "skip": 0, "nothing": 0, "checks": 0, "index_reads": 0}
    for l in bundle.layers:
        if not l.weighted:
            continue
        stack = np.stack([np.array(p.bits, dtype=bool) for p in l.patterns])
        desired = stack[l.location[:, model]]
        others = np.delete(l.location, model, axis=1)
        other_bits = stack[others]  # (K, N-1, P)
        take = desired
        hit = other_bits.any(axis=1) & ~desired
        nothing = ~desired & ~hit
        # a skip stops at the first other pattern that keeps the position
        if others.shape[1]:
            first_hit = other_bits.argmax(axis=1) + 1
        else:
            first_hit = np.zeros(desired.shape, dtype=np.int64)
        counts["take"] += int(take.sum())
        counts["skip"] += int(hit.sum())
        counts["nothing"] += int(nothing.sum())
        counts["checks"] += int(first_hit[hit].sum() + nothing.sum() * others.shape[1])
        counts["index_reads"] += int(l.location.size)
    return counts


def _check_model(bundle: SwmBundle, model: int) -> None:
    if not 0 <= model < bundle.num_models:
        raise IndexError(f"model index {model} outside bundle of {bundle.num_models} models")


def reconstruct_dense(bundle: SwmBundle, model: int) -> TrainedModel:
    """Dense weights of one model, scattered straight from the payload.

    Independent of :func:`extract`: the payload is laid out over the union
    occupancy, then positions outside the model's own pattern are zeroed.
    """
    _check_model(bundle, model)
    net = bundle.net
    weights, biases, masks = [], [], []
    for l in bundle.layers:
        if not l.weighted:
            weights.append(None)
            biases.append(None)
            masks.append(None)
            continue
        kx, ky = kernel_shape(l.layer)
        stack = np.stack([np.array(p.bits, dtype=bool) for p in l.patterns])
        union = stack[l.location].any(axis=1)
        dense = np.zeros(union.shape, dtype=np.float32)
        dense[union] = l.payload
        own = stack[l.location[:, model]]
        dense[~own] = 0.0
        weights.append(from_kernels(l.layer, dense.reshape(-1, kx, ky)).copy())
        masks.append(from_kernels(l.layer, own.reshape(-1, kx, ky)).copy())
        biases.append(l.biases[model].copy())
    return TrainedModel(net, weights, biases, masks)


def condensed_conv(window: np.ndarray, kernel: CondensedKernel) -> float:
    """Dot product of an input window with a condensed kernel.

    The pattern picks the matching inputs out of the window.
    """
    window = np.asarray(window)
    if window.shape != kernel.pattern.shape:
        raise ShapeError(f"window {window.shape} does not match pattern {kernel.pattern.shape}")
    acc = 0.0
    for x, w in zip(window.ravel()[np.flatnonzero(kernel.pattern.bits)], kernel.values):
        acc += float(x) * float(w)
    return acc


def condensed_fc_block(input_slice: np.ndarray, block: CondensedKernel) -> np.ndarray:
    """Partial outputs of one FC block: ``block_x`` sums over the block's input slice."""
    bx, by = block.pattern.shape
    input_slice = np.asarray(input_slice).ravel()
    if input_slice.shape != (by,):
        raise ShapeError(f"input slice of length {input_slice.shape[0]} does not match block width {by}")
    out = np.zeros(bx, dtype=np.float64)
    for pos, w in zip(np.flatnonzero(block.pattern.bits), block.values):
        r, c = divmod(int(pos), by)
        out[r] += float(w) * float(input_slice[c])
    return out


@dataclass
class LayerProgram:
    """Flattened kept weights of one layer, grouped by output unit."""

    layer: LayerDef
    unit: np.ndarray  # output channel (conv) or output row (fc)
    src: np.ndarray  # input channel (conv) or input column (fc)
    dr: np.ndarray
    dc: np.ndarray
    values: np.ndarray
    bias: np.ndarray
    starts: np.ndarray  # entries of unit u live in [starts[u], starts[u + 1])


def layer_programs(bundle: SwmBundle, model: int) -> list[Optional[LayerProgram]]:
    """Per-layer condensed weights, extracted through :func:`extract`."""
    kernels = extract_model(bundle, model)
    progs = []
    for l, ks in zip(bundle.layers, kernels):
        if ks is None:
            progs.append(None)
            continue
        layer = l.layer
        unit, src, dr, dc, vals = [], [], [], [], []
        for kern, ck in enumerate(ks):
            kx, ky = ck.pattern.shape
            pos = np.flatnonzero(ck.pattern.bits)
            r, c = pos // ky, pos % ky
            if isinstance(layer, Conv):
                o, i = divmod(kern, layer.in_ch)
                unit.append(np.full(len(pos), o))
                src.append(np.full(len(pos), i))
                dr.append(r)
                dc.append(c)
            else:
                gn = layer.n // layer.block_y
                bi, bj = divmod(kern, gn)
                unit.append(bi * layer.block_x + r)
                src.append(bj * layer.block_y + c)
                dr.append(np.zeros(len(pos), dtype=np.int64))
                dc.append(np.zeros(len(pos), dtype=np.int64))
            vals.append(ck.values)
        unit = np.concatenate(unit)
        order = np.argsort(unit, kind="stable")
        cat = lambda xs: np.concatenate(xs)[order]
        n_units = out_units(layer)
        starts = np.searchsorted(unit[order], np.arange(n_units + 1))
        progs.append(LayerProgram(layer, unit[order], cat(src), cat(dr), cat(dc), cat(vals).astype(np.float32), l.biases[model], starts))
    return progs


def _pool(layer: Pool, a: np.ndarray) -> np.ndarray:
    k = layer.size
    b_, c_, h, w = a.shape
    oh, ow = h // k, w // k
    blocks = a[:, :, : oh * k, : ow * k].reshape(b_, c_, oh, k, ow, k)
    return blocks.max(axis=(3, 5)) if layer.kind == "max" else blocks.mean(axis=(3, 5))


def condensed_forward(bundle: SwmBundle, model: int, x: np.ndarray, programs=None) -> np.ndarray:
    """Batch inference that touches only kept weights.

    Each kept weight contributes one strided input slice (conv) or one input
    column (fc) to its output unit.
    """
    net = bundle.net
    x = np.asarray(x, dtype=np.float32)
    single = x.shape == net.input_shape
    a = x[None] if single else x
    if a.shape[1:] != net.input_shape:
        raise ShapeError(f"layer 0: expected input of shape {net.input_shape}, got {x.shape}")
    programs = layer_programs(bundle, model) if programs is None else programs
    for layer, prog in zip(net.layers, programs):
        if isinstance(layer, Pool):
            a = _pool(layer, a)
            continue
        if isinstance(layer, Conv):
            s = layer.stride
            oh = (a.shape[2] - layer.kh) // s + 1
            ow = (a.shape[3] - layer.kw) // s + 1
            z = np.zeros((a.shape[0], layer.out_ch, oh, ow), dtype=np.float32)
            for e in range(len(prog.values)):
                r, c = prog.dr[e], prog.dc[e]
                z[:, prog.unit[e]] += prog.values[e] * a[:, prog.src[e], r : r + s * oh : s, c : c + s * ow : s]
            z += prog.bias[None, :, None, None]
        else:
            flat = a.reshape(a.shape[0], -1)
            contrib = flat[:, prog.src] * prog.values
            z = np.zeros((a.shape[0], layer.m), dtype=np.float32)
            np.add.at(z, (slice(None), prog.unit), contrib)
            z += prog.bias
        if layer.activation == "relu":
            z = np.maximum(z, 0)
        a = z
    a = a.reshape(a.shape[0], -1)
    return a[0] if single else a


_LAYER_CODES = {"conv": 0, "fc": 1, "pool": 2}
_ACT_CODES = {"none": 0, "relu": 1}
_POOL_CODES = {"max": 0, "avg": 1}


def _layer_fields(layer: LayerDef) -> list[int]:
    if isinstance(layer, Conv):
        return [layer.in_ch, layer.out_ch, layer.kh, layer.kw, layer.stride, _ACT_CODES[layer.activation]]
    if isinstance(layer, FC):
        return [layer.m, layer.n, layer.block_x, layer.block_y, _ACT_CODES[layer.activation]]
    return [_POOL_CODES[layer.kind], layer.size]


_N_FIELDS = {0: 6, 1: 5, 2: 2}


def _layer_from_fields(code: int, f: Sequence[int]) -> LayerDef:
    acts = {v: k for k, v in _ACT_CODES.items()}
    pools = {v: k for k, v in _POOL_CODES.items()}
    try:
        if code == 0:
            return Conv(f[0], f[1], f[2], f[3], f[4], acts[f[5]])
        if code == 1:
            return FC(f[0], f[1], f[2], f[3], acts[f[4]])
        return Pool(pools[f[0]], f[1])
    except KeyError as exc:
        raise SwmFormatError(f"unknown enum value {exc.args[0]} in layer fields") from None


def serialize(bundle: SwmBundle) -> bytes:
    """Encode a bundle in the little-endian SWM1 format, CRC32-terminated.

    Header: magic, version u16, num_models u8, num_layers u16, input shape
    3 x u16. Per layer: type u8 and shape fields u16; weighted layers then
    carry pattern_count u8, packed row-major bit patterns (byte padded),
    kernel_count u32, the kernel x model u8 id table, u32 offsets, the f32
    payload and num_models x out_units f32 biases.
    """
    if len(bundle.input_shape) != 3:
        raise ValueError("SWM1 stores a (C, H, W) input shape")
    parts = [MAGIC, struct.pack("<HBH3H", VERSION, bundle.num_models, len(bundle.layers), *bundle.input_shape)]
    for l in bundle.layers:
        fields = _layer_fields(l.layer)
        parts.append(struct.pack(f"<B{len(fields)}H", _LAYER_CODES[l.layer.type], *fields))
        if not l.weighted:
            continue
        parts.append(struct.pack("<B", len(l.patterns)))
        for p in l.patterns:
            parts.append(np.packbits(np.array(p.bits, dtype=np.uint8)).tobytes())
        parts.append(struct.pack("<I", len(l.location)))
        parts.append(np.ascontiguousarray(l.location, dtype=np.uint8).tobytes())
        parts.append(np.asarray(l.offsets, dtype="<u4").tobytes())
        parts.append(np.asarray(l.payload, dtype="<f4").tobytes())
        parts.append(np.asarray(l.biases, dtype="<f4").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedError(f"need {n} bytes at offset {self.pos}, only {len(self.buf) - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(dt.itemsize * count), dtype=dt).copy()


def deserialize(data: bytes) -> SwmBundle:
    data = bytes(data)
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 4 + 11 + 4:
        raise TruncatedError("file shorter than the SWM1 header")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise ChecksumError(f"CRC32 mismatch: stored {crc:08x}, computed {zlib.crc32(body):08x}")
    r = _Reader(body)
    r.take(4)
    version, n_models, n_layers, *shape = r.unpack("<HBH3H")
    if version != VERSION:
        raise VersionError(f"unsupported SWM version {version}")
    layers = []
    for _ in range(n_layers):
        (code,) = r.unpack("<B")
        if code not in _N_FIELDS:
            raise SwmFormatError(f"unknown layer type code {code}")
        fields = r.unpack(f"<{_N_FIELDS[code]}H")
        layer = _layer_from_fields(code, fields)
        if code == 2:
            layers.append(BundleLayer(layer))
            continue
        (n_pat,) = r.unpack("<B")
        kx, ky = kernel_shape(layer)
        nbytes = (kx * ky + 7) // 8
        patterns = []
        for pid in range(n_pat):
            bits = np.unpackbits(np.frombuffer(r.take(nbytes), dtype=np.uint8))[: kx * ky]
            try:
                patterns.append(Pattern((kx, ky), tuple(bits.tolist()), pid))
            except ValueError as exc:
                raise SwmFormatError(f"invalid pattern {pid}: {exc}") from None
        (n_kern,) = r.unpack("<I")
        if n_kern != kernel_count(layer):
            raise SwmFormatError(f"kernel count {n_kern} does not match layer shape ({kernel_count(layer)})")
        location = r.array("u1", n_kern * n_models).reshape(n_kern, n_models)
        if n_pat and location.size and location.max() >= n_pat:
            raise SwmFormatError("location index refers to a missing pattern")
        offsets = r.array("<u4", n_kern)
        bl = BundleLayer(layer, patterns, location, offsets)
        counts = bl.union_counts()
        expected = np.concatenate([[0], np.cumsum(counts)[:-1]])
        if not np.array_equal(offsets, expected):
            raise SwmFormatError("payload offsets are inconsistent with the pattern table")
        bl.payload = r.array("<f4", int(counts.sum())).astype(np.float32)
        bl.biases = r.array("<f4", n_models * out_units(layer)).reshape(n_models, out_units(layer)).astype(np.float32)
        layers.append(bl)
    if r.pos != len(body):
        raise SwmFormatError(f"{len(body) - r.pos} trailing bytes before the checksum")
    bundle = SwmBundle(n_models, tuple(shape), layers)
    bundle.net  # validates the layer chain
    return bundle


def save_bundle(bundle: SwmBundle, path) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize(bundle))


def load_bundle(path) -> SwmBundle:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
