"""Linear latency predictor: per (mode, layer type), latency = a * kept_fraction * MACs + b."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.linear_model import LinearRegression
from sklearn.utils.validation import check_is_fitted

from .patterns import ModelAssignment, Pattern, PatternLibrary, layer_masks
from .tensor_nn import FC, Conv, LayerDef, NetworkDef, Pool, mac_count, to_kernels

MODES = ("cpu", "lea_regular", "lea_irregular")
LAYER_TYPES = ("conv", "fc", "pool")
CSV_COLUMNS = ["mode", "layer_type", "in_ch", "out_ch", "kh", "kw", "input_h", "input_w", "sparsity", "latency_s"]


@dataclass(frozen=True)
class CalibrationSample:
    """One timed layer. FC layers use ``in_ch=n``, ``out_ch=m`` and unit spatial sizes."""

    mode: str
    layer_type: str
    in_ch: int
    out_ch: int
    kh: int
    kw: int
    input_h: int
    input_w: int
    sparsity: float
    latency_s: float

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.layer_type not in LAYER_TYPES:
            raise ValueError(f"unknown layer type {self.layer_type!r}")
        if not 0 <= self.sparsity < 1:
            raise ValueError("sparsity must lie in [0, 1)")
        if not self.latency_s > 0:
            raise ValueError("latency must be positive")

    def layer(self) -> tuple[LayerDef, tuple[int, ...]]:
        if self.layer_type == "conv":
            return Conv(self.in_ch, self.out_ch, self.kh, self.kw), (self.in_ch, self.input_h, self.input_w)
        if self.layer_type == "fc":
            return FC(self.out_ch, self.in_ch), (self.in_ch,)
        return Pool("max", self.kh), (self.in_ch, self.input_h, self.input_w)

    @property
    def work(self) -> float:
        """kept_fraction * MACs, the regressor."""
        layer, shape = self.layer()
        return (1.0 - self.sparsity) * mac_count(layer, shape)


def samples_to_csv(samples: Iterable[CalibrationSample]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for s in samples:
        w.writerow([s.mode, s.layer_type, s.in_ch, s.out_ch, s.kh, s.kw, s.input_h, s.input_w,
                    f"{s.sparsity:.6f}", f"{s.latency_s:.9e}"])
    return buf.getvalue()


def samples_from_csv(text: str) -> list[CalibrationSample]:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows or list(rows[0]) != CSV_COLUMNS:
        raise ValueError(f"calibration CSV needs columns {','.join(CSV_COLUMNS)}")
    ints = ("in_ch", "out_ch", "kh", "kw", "input_h", "input_w")
    return [
        CalibrationSample(r["mode"], r["layer_type"], *(int(r[k]) for k in ints), float(r["sparsity"]), float(r["latency_s"]))
        for r in rows
    ]


def load_calibration(path=None) -> list[CalibrationSample]:
    """Read a calibration CSV; with no path, the shipped default calibration."""
    if path is None:
        text = resources.files("swmkit").joinpath("data/default_calibration.csv").read_text()
    else:
        text = Path(path).read_text()
    return samples_from_csv(text)


def generate_calibration(device=None, noise: float = 0.0, seed: int = 0, sparsities=(0.0, 0.25, 0.5, 0.75, 0.875)) -> list[CalibrationSample]:
    """Time a grid of layers on the simulator's cost model, with relative Gaussian noise."""
    from .runtime import DeviceProfile

    device = DeviceProfile() if device is None else device
    rng = np.random.default_rng(seed)
    grid = []
    for ci, co, hw in [(1, 8, 16), (8, 8, 16), (8, 12, 7), (16, 16, 12), (4, 32, 10)]:
        grid.append(("conv", ci, co, 3, 3, hw, hw))
    for n, m in [(300, 24), (120, 84), (84, 12), (512, 64)]:
        grid.append(("fc", n, m, 1, 1, 1, 1))
    samples = []
    for mode in MODES:
        for lt, ci, co, kh, kw, h, w in grid:
            for sp in sparsities:
                s = CalibrationSample(mode, lt, ci, co, kh, kw, h, w, sp, 1.0)
                layer, shape = s.layer()
                t = device.layer_time(layer, shape, 1.0 - sp, mode) * (1.0 + noise * rng.standard_normal())
                samples.append(CalibrationSample(mode, lt, ci, co, kh, kw, h, w, sp, t))
        for c, hw, k in [(8, 14, 2), (12, 10, 2), (4, 16, 4), (16, 8, 2)]:
            s = CalibrationSample(mode, "pool", c, c, k, k, hw, hw, 0.0, 1.0)
            layer, shape = s.layer()
            t = device.layer_time(layer, shape, 1.0, mode) * (1.0 + noise * rng.standard_normal())
            samples.append(CalibrationSample(mode, "pool", c, c, k, k, hw, hw, 0.0, t))
    return samples


@dataclass(frozen=True)
class LineFit:
    slope: float
    intercept: float
    rms: float
    r2: float
    n: int

    def __call__(self, work: float) -> float:
        return self.slope * work + self.intercept


def fit_line(x: np.ndarray, y: np.ndarray) -> LineFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(x)) < 2:
        raise ValueError("need at least two distinct kept-fraction x MAC values to fit a line")
    reg = LinearRegression().fit(x[:, None], y)
    resid = y - reg.predict(x[:, None])
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return LineFit(float(reg.coef_[0]), float(reg.intercept_), float(np.sqrt((resid**2).mean())), r2, len(x))


def layer_type(layer: LayerDef) -> str:
    return layer.type


def is_regular_layer(layer: LayerDef, mask: np.ndarray) -> bool:
    """True when every kernel's kept positions form full rows or full columns."""
    for k in to_kernels(layer, mask):
        if not k.any():
            continue
        if not Pattern.from_array(k).is_regular():
            return False
    return True


class LatencyPredictor(BaseEstimator):
    """Fits one line per (mode, layer type) on calibration samples.

    ``mode="lea"`` at prediction time resolves per layer to ``lea_regular``
    or ``lea_irregular`` from the layer's masks.
    """

    def __init__(self, source: str = ""):
        self.source = source

    def fit(self, samples: Sequence[CalibrationSample], y=None):
        groups: dict[tuple[str, str], list[CalibrationSample]] = {}
        for s in samples:
            groups.setdefault((s.mode, s.layer_type), []).append(s)
        if not groups:
            raise ValueError("no calibration samples")
        fits = {}
        for key, group in sorted(groups.items()):
            try:
                fits[key] = fit_line(np.array([s.work for s in group]), np.array([s.latency_s for s in group]))
            except ValueError as exc:
                raise ValueError(f"{key[0]}/{key[1]}: {exc}") from None
            if fits[key].slope < 0:
                raise ValueError(f"{key[0]}/{key[1]}: fitted slope is negative")
        self.fits_ = fits
        return self

    def _fit_for(self, mode: str, ltype: str) -> LineFit:
        check_is_fitted(self, "fits_")
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        try:
            return self.fits_[(mode, ltype)]
        except KeyError:
            raise ValueError(f"profile has no fit for {mode}/{ltype}") from None

    def predict_layer(self, layer: LayerDef, in_shape, kept_fraction: float = 1.0, mode: str = "cpu") -> float:
        if not 0 < kept_fraction <= 1:
            raise ValueError("kept fraction must lie in (0, 1]")
        return self._fit_for(mode, layer_type(layer))(kept_fraction * mac_count(layer, in_shape))

    def predict_masks(self, net: NetworkDef, masks: Sequence[Optional[np.ndarray]], mode: str = "cpu") -> float:
        """Whole-network latency for explicit per-layer masks (None for pooling layers)."""
        shapes = net.shapes()
        total = 0.0
        for i, layer in enumerate(net.layers):
            m = masks[i]
            kept = 1.0 if m is None else float(m.mean())
            layer_mode = mode
            if mode == "lea":
                regular = m is None or is_regular_layer(layer, m)
                layer_mode = "lea_regular" if regular else "lea_irregular"
            total += self.predict_layer(layer, shapes[i], kept, layer_mode)
        return total

    def predict_model(self, net: NetworkDef, assignment: ModelAssignment, library: PatternLibrary, mode: str = "cpu") -> float:
        return self.predict_masks(net, layer_masks(net, assignment, library), mode)

    def predict(self, X) -> np.ndarray:
        """Latency of each calibration-style sample in ``X``."""
        return np.array([self._fit_for(s.mode, s.layer_type)(s.work) for s in X])

    def score(self, X, y=None) -> float:
        """R^2 of predictions on samples ``X`` against their recorded latencies."""
        y_true = np.array([s.latency_s for s in X])
        resid = y_true - self.predict(X)
        ss_tot = ((y_true - y_true.mean()) ** 2).sum()
        return float(1 - (resid**2).sum() / ss_tot) if ss_tot > 0 else 1.0

    def to_dict(self) -> dict:
        check_is_fitted(self, "fits_")
        return {
            "source": self.source,
            "fits": [{"mode": m, "layer_type": t, **asdict(f)} for (m, t), f in sorted(self.fits_.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LatencyPredictor":
        p = cls(d.get("source", ""))
        p.fits_ = {
            (f["mode"], f["layer_type"]): LineFit(f["slope"], f["intercept"], f["rms"], f["r2"], f["n"]) for f in d["fits"]
        }
        return p

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LatencyPredictor":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_profile(samples: Sequence[CalibrationSample], source: str = "") -> LatencyPredictor:
    return LatencyPredictor(source).fit(samples)


def default_profile() -> LatencyPredictor:
    return fit_profile(load_calibration(), source="default_calibration.csv")


def predict_layer(profile: LatencyPredictor, layer: LayerDef, in_shape, kept_fraction: float, mode: str = "cpu") -> float:
    return profile.predict_layer(layer, in_shape, kept_fraction, mode)


def predict_model(profile: LatencyPredictor, net: NetworkDef, assignment: ModelAssignment, library: PatternLibrary,
                  mode: str = "cpu") -> float:
    return profile.predict_model(net, assignment, library, mode)
