"""Bit-matrix patterns, pattern libraries and per-kernel pattern assignments."""
from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .tensor_nn import NetworkDef, ShapeError, from_kernels, is_weighted, kernel_count, kernel_shape, weight_shape

BANDS = ("high", "medium", "low")


@dataclass(frozen=True)
class Pattern:
    """A kernel-shaped 0/1 mask stored row-major; 1 means the weight is kept."""

    shape: tuple[int, int]
    bits: tuple[int, ...]
    id: Optional[int] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))
        object.__setattr__(self, "bits", tuple(int(bool(b)) for b in self.bits))
        if len(self.bits) != self.shape[0] * self.shape[1]:
            raise ValueError(f"{len(self.bits)} bits do not fill a {self.shape} pattern")
        if not any(self.bits):
            raise ValueError("a pattern must keep at least one position")

    @classmethod
    def from_array(cls, arr, id: Optional[int] = None) -> "Pattern":
        arr = np.asarray(arr)
        return cls(arr.shape, tuple(arr.astype(bool).ravel().tolist()), id)

    @classmethod
    def from_string(cls, text: str, id: Optional[int] = None) -> "Pattern":
        """Parse ``"101 010 101"``: one whitespace-separated group per row."""
        rows = text.split()
        if not rows or len({len(r) for r in rows}) != 1 or set("".join(rows)) - {"0", "1"}:
            raise ValueError(f"malformed pattern string {text!r}")
        return cls((len(rows), len(rows[0])), tuple(int(ch) for ch in "".join(rows)), id)

    def to_string(self) -> str:
        x, y = self.shape
        flat = "".join(map(str, self.bits))
        return " ".join(flat[r * y : (r + 1) * y] for r in range(x))

    @property
    def array(self) -> np.ndarray:
        return np.array(self.bits, dtype=bool).reshape(self.shape)

    @property
    def size(self) -> int:
        return len(self.bits)

    @property
    def popcount(self) -> int:
        return sum(self.bits)

    def sparsity(self) -> float:
        return 1.0 - self.popcount / self.size

    def band(self) -> str:
        return sparsity_band(self.popcount, self.size)

    def issubset(self, other: "Pattern") -> bool:
        _check_same_shape([self, other])
        return all(b <= o for b, o in zip(self.bits, other.bits))

    def is_regular(self) -> bool:
        """Kept positions form complete rows, or complete columns, of the kernel."""
        a = self.array
        rows = a.all(axis=1)
        cols = a.all(axis=0)
        return bool(np.array_equal(a, np.repeat(rows[:, None], a.shape[1], axis=1))
                    or np.array_equal(a, np.repeat(cols[None, :], a.shape[0], axis=0)))

    def __str__(self) -> str:
        return self.to_string()


def sparsity_band(kept: int, size: int) -> str:
    """high keeps <= ceil(size/3); low keeps >= ceil(2*size/3); medium otherwise."""
    if kept <= math.ceil(size / 3):
        return "high"
    if kept >= math.ceil(2 * size / 3):
        return "low"
    return "medium"


def centre_position(shape: tuple[int, int]) -> tuple[int, int]:
    return (math.ceil(shape[0] / 2) - 1, math.ceil(shape[1] / 2) - 1)


def _check_same_shape(ps: Sequence[Pattern]) -> None:
    if not ps:
        raise ValueError("empty pattern list")
    shapes = {p.shape for p in ps}
    if len(shapes) != 1:
        raise ShapeError(f"patterns have different shapes: {sorted(shapes)}")


def union_patterns(ps: Sequence[Pattern]) -> Pattern:
    _check_same_shape(ps)
    return Pattern(ps[0].shape, tuple(int(any(col)) for col in zip(*(p.bits for p in ps))))


def intersection_count(ps: Sequence[Pattern]) -> int:
    _check_same_shape(ps)
    return sum(all(col) for col in zip(*(p.bits for p in ps)))


def symmetric_difference_cost(ps: Sequence[Pattern]) -> int:
    """Positions kept by some but not all patterns: ``|union| - |intersection|``."""
    if len(ps) < 2:
        raise ValueError("need at least two patterns")
    return union_patterns(ps).popcount - intersection_count(ps)


def pairwise_xor_cost(ps: Sequence[Pattern]) -> int:
    """Sum of Hamming distances between consecutive patterns."""
    if len(ps) < 2:
        raise ValueError("need at least two patterns")
    _check_same_shape(ps)
    return sum(sum(a != b for a, b in zip(p.bits, q.bits)) for p, q in zip(ps, ps[1:]))


SHARING_COSTS = {"union_minus_intersection": symmetric_difference_cost, "pairwise_xor": pairwise_xor_cost}


def is_subset_chain(ps: Sequence[Pattern]) -> bool:
    """True iff each pattern (ordered high to low sparsity) is contained in the next."""
    if len(ps) <= 1:
        return True
    _check_same_shape(ps)
    return all(p.issubset(q) for p, q in zip(ps, ps[1:]))


@dataclass(frozen=True)
class PatternLibrary:
    shape: tuple[int, int]
    patterns: tuple[Pattern, ...]

    def __post_init__(self):
        pats = tuple(Pattern(p.shape, p.bits, i) for i, p in enumerate(self.patterns))
        object.__setattr__(self, "patterns", pats)
        object.__setattr__(self, "shape", tuple(self.shape))
        if any(p.shape != self.shape for p in pats):
            raise ShapeError(f"all patterns in a library must be {self.shape}")
        if len(set(pats)) != len(pats):
            raise ValueError("duplicate patterns in library")

    def __len__(self) -> int:
        return len(self.patterns)

    def __getitem__(self, i: int) -> Pattern:
        return self.patterns[i]

    def __iter__(self):
        return iter(self.patterns)

    @property
    def sparsity_level(self) -> dict[int, str]:
        return {p.id: p.band() for p in self.patterns}

    def band(self, pattern_id: int) -> str:
        return self.patterns[pattern_id].band()

    def subset(self, ids: Sequence[int]) -> "PatternLibrary":
        return PatternLibrary(self.shape, tuple(self.patterns[i] for i in ids))

    def to_dict(self) -> dict:
        return {
            "shape": list(self.shape),
            "patterns": [{"id": p.id, "bits": p.to_string(), "band": p.band()} for p in self.patterns],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PatternLibrary":
        entries = sorted(d["patterns"], key=lambda e: e["id"])
        if [e["id"] for e in entries] != list(range(len(entries))):
            raise ValueError("pattern ids must be dense from 0")
        pats = tuple(Pattern.from_string(e["bits"]) for e in entries)
        return cls(tuple(d["shape"]), pats)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PatternLibrary":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _ranked_positions(shape: tuple[int, int], rng: np.random.Generator) -> list[int]:
    """Non-centre positions, nearest to the centre first; ties broken by ``rng``."""
    cy, cx = centre_position(shape)
    others = [p for p in range(shape[0] * shape[1]) if p != cy * shape[1] + cx]
    tie = rng.permutation(len(others))
    dist = [(p // shape[1] - cy) ** 2 + (p % shape[1] - cx) ** 2 for p in others]
    order = sorted(range(len(others)), key=lambda j: (dist[j], tie[j]))
    return [others[j] for j in order]


def _kept_counts(band: Union[str, int], size: int) -> list[int]:
    if isinstance(band, (int, np.integer)):
        if not 1 <= band <= size:
            raise ValueError(f"kept count {band} outside [1, {size}]")
        return [int(band)]
    if band not in BANDS:
        raise ValueError(f"unknown band {band!r}")
    return [k for k in range(1, size + 1) if sparsity_band(k, size) == band]


def generate_pattern_space(
    shape: tuple[int, int],
    counts_per_band: Union[int, Mapping[Union[str, int], int]],
    seed: int = 0,
) -> PatternLibrary:
    """Build a library of distinct patterns that all keep the kernel centre.

    ``counts_per_band`` maps a band name (``high``/``medium``/``low``) or an
    exact kept count to the number of patterns wanted. An int total is split
    evenly over the three bands, the remainder going to the sparser bands.
    Within a band, kept counts are visited round-robin and each count yields
    its most central combinations first.
    """
    x, y = int(shape[0]), int(shape[1])
    if x < 2 or y < 2:
        raise ValueError("pattern shape must be at least 2x2")
    size = x * y
    if isinstance(counts_per_band, (int, np.integer)):
        total = int(counts_per_band)
        base, extra = divmod(total, len(BANDS))
        counts_per_band = {b: base + (i < extra) for i, b in enumerate(BANDS)}
    rng = np.random.default_rng(seed)
    ranked = _ranked_positions((x, y), rng)
    cy, cx = centre_position((x, y))
    centre = cy * y + cx

    def _order(item):
        key = item[0]
        return (BANDS.index(key), 0) if isinstance(key, str) else (len(BANDS) + key, 1)

    patterns: list[Pattern] = []
    seen: set = set()
    for band, count in sorted(counts_per_band.items(), key=_order):
        if count < 1:
            raise ValueError(f"count for band {band!r} must be at least 1")
        kept = _kept_counts(band, size)
        available = sum(math.comb(size - 1, k - 1) for k in kept)
        if count > available:
            raise ValueError(f"band {band!r}: requested {count} patterns but only {available} exist")
        gens = {k: itertools.combinations(ranked, k - 1) for k in kept}
        picked = 0
        while picked < count:
            for k in list(gens):
                if picked == count:
                    break
                combo = next(gens[k], None)
                if combo is None:
                    del gens[k]
                    continue
                bits = [0] * size
                bits[centre] = 1
                for pos in combo:
                    bits[pos] = 1
                pat = Pattern((x, y), tuple(bits))
                if pat in seen:
                    continue
                seen.add(pat)
                patterns.append(pat)
                picked += 1
    return PatternLibrary((x, y), tuple(patterns))


@dataclass
class ModelAssignment:
    """Pattern id per kernel (or FC block) for every prunable layer of one model."""

    layer_ids: dict[int, np.ndarray]
    label: str = ""

    def ids(self, layer: int) -> np.ndarray:
        return self.layer_ids[layer]


def prunable_layers(net: NetworkDef, library: PatternLibrary) -> list[int]:
    """Weighted layers whose kernel/block shape matches the library shape."""
    return [i for i in net.weighted_layers() if kernel_shape(net.layers[i]) == tuple(library.shape)]


def uniform_assignment(net: NetworkDef, library: PatternLibrary, pattern_id: int, label: str = "") -> ModelAssignment:
    """Apply one pattern to every kernel of every prunable layer."""
    if not 0 <= pattern_id < len(library):
        raise ValueError(f"pattern id {pattern_id} not in library of size {len(library)}")
    ids = {i: np.full(kernel_count(net.layers[i]), pattern_id, dtype=np.int64) for i in prunable_layers(net, library)}
    return ModelAssignment(ids, label or library.band(pattern_id))


def random_assignment(
    net: NetworkDef, library: PatternLibrary, rng: np.random.Generator, choices: Optional[Sequence[int]] = None, label: str = ""
) -> ModelAssignment:
    choices = np.arange(len(library)) if choices is None else np.asarray(choices)
    ids = {i: rng.choice(choices, size=kernel_count(net.layers[i])) for i in prunable_layers(net, library)}
    return ModelAssignment(ids, label)


def layer_masks(net: NetworkDef, assignment: ModelAssignment, library: PatternLibrary) -> list[Optional[np.ndarray]]:
    """Full-resolution 0/1 masks; layers the library cannot prune stay dense."""
    stack = np.stack([p.array for p in library.patterns])
    masks: list[Optional[np.ndarray]] = []
    prunable = set(prunable_layers(net, library))
    for i, layer in enumerate(net.layers):
        if not is_weighted(layer):
            masks.append(None)
            continue
        if i not in prunable:
            masks.append(np.ones(weight_shape(layer), dtype=bool))
            continue
        if i not in assignment.layer_ids:
            raise KeyError(f"assignment has no entry for layer {i}")
        ids = np.asarray(assignment.layer_ids[i])
        want = kernel_count(layer)
        if ids.shape != (want,):
            missing = min(len(ids), want)
            raise KeyError(f"layer {i}: assignment covers {len(ids)} of {want} kernels (first gap at kernel {missing})")
        if ids.min() < 0 or ids.max() >= len(library):
            raise KeyError(f"layer {i}: pattern id outside library of size {len(library)}")
        masks.append(from_kernels(layer, stack[ids]).copy())
    return masks


def apply_mask(net: NetworkDef, weights, assignment: ModelAssignment, library: PatternLibrary):
    """Zero the weights at pruned positions; returns ``(masked_weights, masks)``."""
    masks = layer_masks(net, assignment, library)
    out = []
    for w, m in zip(weights, masks):
        out.append(None if w is None else np.where(m, w, 0).astype(w.dtype))
    return out, masks
