"""Intermittent-power device simulator with adaptive model switching.

The device draws ``active_power_w`` whenever it is on and charges a
capacitor from a piecewise-constant harvested-power trace. It powers on
when the buffer reaches the turn-on energy and, before the buffer would
drop to the turn-off energy, it checkpoints and powers off. Energy is
integrated in closed form per trace segment.
"""
from __future__ import annotations

import bisect
import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .codec import LayerProgram, SwmBundle, extraction_ops, layer_programs
from .tensor_nn import FC, Conv, LayerDef, Pool, ShapeError, mac_count

LEVELS = ("low", "medium", "high")


class HorizonExceeded(RuntimeError):
    """The simulation cannot finish before the horizon (e.g. no harvest left)."""


@dataclass(frozen=True)
class DeviceProfile:
    """Capacitor-buffered device.

    Every on-time action (compute, checkpoint, restore, weight transfer,
    extraction) draws ``active_power_w``; its energy is time x power.
    Per-MAC times default to a 16 MHz-class budget and are calibration
    constants, not measurements.
    """

    capacitance_f: float = 100e-6
    v_operating: float = 3.3
    v_on: float = 3.3
    v_off: float = 1.8
    active_power_w: float = 15e-3
    compute_mode: str = "cpu"
    mac_time_s: dict = field(default_factory=lambda: {"cpu": 2.5e-6, "lea_irregular": 1.0e-6, "lea_regular": 0.6e-6})
    layer_overhead_s: dict = field(default_factory=lambda: {"cpu": 20e-6, "lea_irregular": 20e-6, "lea_regular": 15e-6})
    pool_op_time_s: float = 0.25e-6
    checkpoint_time_s: float = 0.2e-3
    checkpoint_time_per_value_s: float = 0.05e-6
    restore_time_s: float = 0.2e-3
    restore_time_per_value_s: float = 0.05e-6
    write_time_per_weight_s: float = 0.5e-6
    offchip_time_per_weight_s: float = 2.0e-6
    extract_time_per_step_s: float = 25e-9
    extract_time_per_check_s: float = 25e-9
    index_read_time_s: float = 25e-9
    safety_factor: float = 1.5
    max_item_s: float = 0.5e-3
    cycle_bands_s: tuple = (0.1216, 0.1436)

    def __post_init__(self):
        if not self.v_on > self.v_off > 0:
            raise ValueError("turn-on voltage must exceed turn-off voltage")
        costs = [self.capacitance_f, self.active_power_w, self.pool_op_time_s, self.checkpoint_time_s,
                 self.checkpoint_time_per_value_s, self.restore_time_s, self.restore_time_per_value_s,
                 self.write_time_per_weight_s, self.offchip_time_per_weight_s, self.extract_time_per_step_s,
                 self.extract_time_per_check_s, self.index_read_time_s]
        costs += list(self.mac_time_s.values()) + list(self.layer_overhead_s.values())
        if any(c < 0 for c in costs):
            raise ValueError("device costs must be non-negative")
        if self.compute_mode not in ("cpu", "lea"):
            raise ValueError(f"unknown compute mode {self.compute_mode!r}")
        if not self.cycle_bands_s[0] <= self.cycle_bands_s[1]:
            raise ValueError("cycle bands must be ordered (high_max <= medium_max)")

    @property
    def energy_on(self) -> float:
        return 0.5 * self.capacitance_f * self.v_on**2

    @property
    def energy_off(self) -> float:
        return 0.5 * self.capacitance_f * self.v_off**2

    def checkpoint_time(self, n_values: int) -> float:
        return self.checkpoint_time_s + self.checkpoint_time_per_value_s * n_values

    def restore_time(self, n_values: int) -> float:
        return self.restore_time_s + self.restore_time_per_value_s * n_values

    def layer_time(self, layer: LayerDef, in_shape, kept_fraction: float = 1.0, mode: str = "cpu") -> float:
        """Uninterrupted execution time of one layer: fixed overhead plus per-MAC cost."""
        macs = mac_count(layer, in_shape)
        if isinstance(layer, Pool):
            return self.layer_overhead_s[mode] + macs * self.pool_op_time_s
        return self.layer_overhead_s[mode] + kept_fraction * macs * self.mac_time_s[mode]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cycle_bands_s"] = list(self.cycle_bands_s)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceProfile":
        d = dict(d)
        if "cycle_bands_s" in d:
            d["cycle_bands_s"] = tuple(d["cycle_bands_s"])
        return replace(cls(), **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "DeviceProfile":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PowerTrace:
    """Piecewise-constant power; segment ``i`` runs from ``starts[i]`` to ``starts[i+1]``.

    The last segment extends forever.
    """

    starts: tuple
    powers: tuple

    def __post_init__(self):
        object.__setattr__(self, "starts", tuple(float(t) for t in self.starts))
        object.__setattr__(self, "powers", tuple(float(p) for p in self.powers))
        if not self.starts or len(self.starts) != len(self.powers):
            raise ValueError("trace needs matching, nonempty start and power lists")
        if self.starts[0] != 0.0:
            raise ValueError("trace must start at t=0")
        if any(b <= a for a, b in zip(self.starts, self.starts[1:])):
            raise ValueError("segment start times must be strictly increasing")
        if any(p < 0 for p in self.powers):
            raise ValueError("harvested power cannot be negative")

    @classmethod
    def constant(cls, power_w: float) -> "PowerTrace":
        return cls((0.0,), (power_w,))

    @classmethod
    def from_segments(cls, segments: Iterable[tuple[float, float]]) -> "PowerTrace":
        segs = list(segments)
        return cls(tuple(s for s, _ in segs), tuple(p for _, p in segs))

    def index_at(self, t: float) -> int:
        return max(0, bisect.bisect_right(self.starts, t) - 1)

    def power_at(self, t: float) -> float:
        return self.powers[self.index_at(t)]

    def segment_end(self, i: int) -> float:
        return self.starts[i + 1] if i + 1 < len(self.starts) else math.inf

    def to_csv(self) -> str:
        lines = ["t_start_s,power_w"] + [f"{t:.9g},{p:.9g}" for t, p in zip(self.starts, self.powers)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "PowerTrace":
        rows = list(csv.DictReader(io.StringIO(text)))
        if not rows or set(rows[0]) != {"t_start_s", "power_w"}:
            raise ValueError("power trace CSV needs columns t_start_s,power_w")
        return cls(tuple(float(r["t_start_s"]) for r in rows), tuple(float(r["power_w"]) for r in rows))

    @classmethod
    def load(cls, path) -> "PowerTrace":
        return cls.from_csv(Path(path).read_text())


def _breakpoints(t0: float, t1: float, traces: Sequence[PowerTrace]) -> list[float]:
    pts = {t0, t1}
    for tr in traces:
        for s in tr.starts:
            if t0 < s < t1:
                pts.add(s)
    return sorted(pts)


def advance_energy(energy: float, t: float, duration: float, load_w: float, trace: PowerTrace, cap: float) -> float:
    """Buffer energy after ``duration`` seconds of constant load, capped at ``cap``."""
    if duration <= 0:
        return energy
    i = trace.index_at(t)
    end = t + duration
    while True:
        seg_end = min(trace.segment_end(i), end)
        rate = trace.powers[i] - load_w
        energy = min(energy + rate * (seg_end - t), cap)
        if seg_end >= end:
            return energy
        t = seg_end
        i += 1


def time_to_energy(energy: float, t: float, target: float, load_w: float, trace: PowerTrace, cap: float) -> float:
    """First time the buffer reaches ``target`` under constant load (``inf`` if never).

    Works both for charging (target above) and draining (target below).
    """
    if math.isclose(energy, target, rel_tol=0, abs_tol=1e-18):
        return t
    rising = target > energy
    i = trace.index_at(t)
    while True:
        seg_end = trace.segment_end(i)
        rate = trace.powers[i] - load_w
        if rising and rate > 0:
            hit = t + (target - energy) / rate
            if hit <= seg_end:
                return hit
        if not rising and rate < 0:
            hit = t + (target - energy) / rate
            if hit <= seg_end:
                return hit
        if math.isinf(seg_end):
            return math.inf
        energy = min(energy + rate * (seg_end - t), cap)
        t = seg_end
        i += 1


@dataclass
class Event:
    t: float
    event: str
    detail: str = ""


def events_to_csv(events: Sequence[Event]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t_s", "event", "detail"])
    for e in events:
        w.writerow([f"{e.t:.9f}", e.event, e.detail])
    return buf.getvalue()


def simulate_power(
    device: DeviceProfile,
    trace: PowerTrace,
    load_schedule: PowerTrace,
    horizon_s: float,
    energy0: float = 0.0,
    powered: Optional[bool] = None,
) -> list[Event]:
    """Power-on/off events of a device drawing ``load_schedule`` watts while on.

    Off, the buffer charges until the turn-on energy; on, it follows
    harvested minus load until the turn-off energy.
    """
    e_on, e_off = device.energy_on, device.energy_off
    if not 0 <= energy0 <= e_on:
        raise ValueError("initial energy outside [0, turn-on energy]")
    on = energy0 >= e_on if powered is None else powered
    t, energy = 0.0, float(energy0)
    events: list[Event] = []
    pts = _breakpoints(0.0, horizon_s, [trace, load_schedule]) if horizon_s > 0 else [0.0]
    k = 0
    while t < horizon_s:
        while k + 1 < len(pts) and pts[k + 1] <= t:
            k += 1
        seg_end = pts[k + 1] if k + 1 < len(pts) else horizon_s
        harvest = trace.power_at(t)
        load = load_schedule.power_at(t) if on else 0.0
        rate = harvest - load
        target = e_off if on else e_on
        hit = math.inf
        if on and rate < 0:
            hit = t + (target - energy) / rate
        elif not on and rate > 0:
            hit = t + (target - energy) / rate
        if hit <= seg_end:
            t, energy = hit, target
            on = not on
            events.append(Event(t, "power_on" if on else "power_off", f"energy={energy:.6e}"))
        else:
            energy = min(energy + rate * (seg_end - t), e_on)
            t = seg_end
    if not events and not on and trace.powers[-1] <= 0 and energy < e_on:
        raise HorizonExceeded("buffer never reaches the turn-on energy: harvest is zero")
    return events


class EnergyLevels:
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"


@dataclass(frozen=True)
class EnergyState:
    """Power-cycle tracker: the last three completed cycle durations and the level they imply."""

    energy: float = 0.0
    powered: bool = False
    history: tuple = ()
    classification: str = "high"


def classify_cycles(mean_duration: float, bands: Sequence[float]) -> str:
    """Short cycles mean fast recharging, i.e. plenty of harvested energy."""
    high_max, medium_max = bands
    if mean_duration < high_max:
        return "high"
    if mean_duration < medium_max:
        return "medium"
    return "low"


def energy_tracker_update(state: EnergyState, completed_cycle_duration: float, bands: Sequence[float]) -> EnergyState:
    """Push one cycle duration; classify by the mean of the last three.

    Until three cycles have been seen the classification stays at ``high``.
    """
    if not completed_cycle_duration > 0:
        raise ValueError("cycle duration must be positive")
    history = (state.history + (float(completed_cycle_duration),))[-3:]
    level = classify_cycles(sum(history) / 3, bands) if len(history) == 3 else "high"
    return replace(state, history=history, classification=level)


def adaptive_select(classification: str, n_models: int) -> int:
    """Map an energy level to a model index (0 = sparsest, n-1 = densest)."""
    if classification not in LEVELS:
        raise ValueError(f"unknown energy level {classification!r}")
    if n_models < 1:
        raise ValueError("need at least one model")
    rank = LEVELS.index(classification)
    return int(math.floor(rank * (n_models - 1) / (len(LEVELS) - 1) + 0.5))


@dataclass
class Checkpoint:
    layer: int
    index: int
    partial: np.ndarray
    model: int


@dataclass
class RunReport:
    inference: int
    model_index: int
    start_s: float
    end_s: float
    cycles: int
    checkpoints: int
    energy_j: float
    weights_rewritten: int = 0
    switch_time_s: float = 0.0

    @property
    def latency_s(self) -> float:
        return self.end_s - self.start_s


def reports_to_csv(reports: Sequence[RunReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["inference", "model_index", "start_s", "end_s", "latency_s", "cycles", "checkpoints",
                "energy_j", "weights_rewritten", "switch_time_s"])
    for r in reports:
        w.writerow([r.inference, r.model_index, f"{r.start_s:.9f}", f"{r.end_s:.9f}", f"{r.latency_s:.9f}",
                    r.cycles, r.checkpoints, f"{r.energy_j:.9e}", r.weights_rewritten, f"{r.switch_time_s:.9f}"])
    return buf.getvalue()


def layer_modes(bundle: SwmBundle, model: int, device: DeviceProfile) -> list[str]:
    """Compute mode per layer; on the accelerator a layer is regular if all its kernels are."""
    modes = []
    for l in bundle.layers:
        if device.compute_mode == "cpu" or not l.weighted:
            modes.append("cpu" if device.compute_mode == "cpu" else "lea_regular")
            continue
        used = {int(i) for i in l.location[:, model]}
        regular = all(l.patterns[i].is_regular() for i in used)
        modes.append("lea_regular" if regular else "lea_irregular")
    return modes


def inference_time(bundle: SwmBundle, model: int, device: DeviceProfile) -> float:
    """Uninterrupted compute time of one inference (no checkpoints, no charging)."""
    net = bundle.net
    shapes = net.shapes()
    modes = layer_modes(bundle, model, device)
    total = 0.0
    for i, l in enumerate(bundle.layers):
        if l.weighted:
            pops = np.array([p.popcount for p in l.patterns])
            kept = pops[l.location[:, model]].sum() / (len(l.location) * l.patterns[0].size)
        else:
            kept = 1.0
        total += device.layer_time(l.layer, shapes[i], kept, modes[i])
    return total


def extraction_time(bundle: SwmBundle, model: int, device: DeviceProfile) -> float:
    ops = extraction_ops(bundle, model)
    steps = ops["take"] + ops["skip"] + ops["nothing"]
    return (steps * device.extract_time_per_step_s + ops["checks"] * device.extract_time_per_check_s
            + ops["index_reads"] * device.index_read_time_s)


def measure_extraction_overhead(bundle: SwmBundle, device: DeviceProfile) -> float:
    """Worst-case share of a switch-triggered inference spent extracting weights.

    For each model: extraction time / (extraction + inference time); the
    maximum over models is returned.
    """
    worst = 0.0
    for k in range(bundle.num_models):
        ext = extraction_time(bundle, k, device)
        if ext == 0:
            continue
        worst = max(worst, ext / (ext + inference_time(bundle, k, device)))
    return worst


# failure injection: called with the global work-item counter after each item;
# returns None, "checkpoint" (checkpoint then power off) or "abrupt" (power lost)
FailureHook = Callable[[int], Optional[str]]


class IntermittentDevice:
    """Stateful simulation of one device across any number of inferences."""

    def __init__(
        self,
        device: DeviceProfile,
        trace: PowerTrace,
        energy0: float = 0.0,
        powered: Optional[bool] = None,
        horizon_s: float = 1e5,
        failure_hook: Optional[FailureHook] = None,
    ):
        if not 0 <= energy0 <= device.energy_on:
            raise ValueError("initial energy outside [0, turn-on energy]")
        self.device = device
        self.trace = trace
        self.energy = float(energy0)
        self.powered = energy0 >= device.energy_on if powered is None else bool(powered)
        self.t = 0.0
        self.horizon_s = horizon_s
        self.failure_hook = failure_hook
        self.events: list[Event] = []
        self.tracker = EnergyState(self.energy, self.powered)
        self.last_power_on: Optional[float] = 0.0 if self.powered else None
        self.power_ons = 0
        self.checkpoints = 0
        self.energy_used = 0.0
        self.items = 0
        self.fresh = self.powered
        if self.powered:
            self._log("power_on", "initial")

    def _log(self, event: str, detail: str = "") -> None:
        self.events.append(Event(self.t, event, detail))

    def _charge(self) -> None:
        d = self.device
        t_on = time_to_energy(self.energy, self.t, d.energy_on, 0.0, self.trace, d.energy_on)
        if math.isinf(t_on) or t_on > self.horizon_s:
            raise HorizonExceeded(f"buffer cannot reach the turn-on energy after t={self.t:.6f}s")
        self.t, self.energy = t_on, d.energy_on
        self.powered = True
        self.fresh = True
        self.power_ons += 1
        self._log("power_on", f"energy={self.energy:.6e}")
        if self.last_power_on is not None:
            self.tracker = energy_tracker_update(self.tracker, self.t - self.last_power_on, d.cycle_bands_s)
        self.last_power_on = self.t

    def power_off(self, reason: str) -> None:
        self.powered = False
        self._log("power_off", reason)

    def ensure_on(self) -> bool:
        """Charge if needed; True when a new power cycle started."""
        if self.powered:
            return False
        self._charge()
        return True

    def _spend(self, duration: float) -> None:
        d = self.device
        self.energy = advance_energy(self.energy, self.t, duration, d.active_power_w, self.trace, d.energy_on)
        self.t += duration
        self.energy_used += duration * d.active_power_w
        self.fresh = False
        if self.t > self.horizon_s:
            raise HorizonExceeded(f"simulation passed the {self.horizon_s}s horizon")

    def affordable(self, duration: float, reserve_s: float) -> bool:
        """Can the item run and still leave the safety-scaled reserve above turn-off?"""
        d = self.device
        after = advance_energy(self.energy, self.t, duration, d.active_power_w, self.trace, d.energy_on)
        return after - d.energy_off > d.safety_factor * reserve_s * d.active_power_w


    def run_item(self, duration: float, reserve_s: float = 0.0, on_power_loss: Optional[Callable[[], None]] = None) -> bool:
        """Execute one atomic unit of work if the buffer allows it.

        ``reserve_s`` is the duration of the checkpoint that must remain
        affordable after the item. When it does not, ``on_power_loss`` runs
        (the checkpoint) and the device powers off; the item is not executed
        and False is returned.
        """
        self.ensure_on()
        if self.affordable(duration, reserve_s):
            self._spend(duration)
            self.items += 1
            return True
        if self.fresh:
            raise RuntimeError(f"work item of {duration:.3e}s does not fit in one power cycle")
        if on_power_loss is not None:
            on_power_loss()
        self.power_off("low_energy")
        return False

    def run_persistent(self, duration: float) -> None:
        """Work whose progress is non-volatile (NVM writes, extraction), run in short items."""
        remaining = duration
        while remaining > 1e-15:
            chunk = min(self.device.max_item_s, remaining)
            if self.run_item(chunk):
                remaining -= chunk


class _InferenceRun:
    """Index-checkpointed execution of one condensed inference on an :class:`IntermittentDevice`.

    Work items are single output elements. Completed layer outputs live in
    non-volatile memory; the in-progress layer output is volatile and
    survives a power loss only through a checkpoint.
    """

    def __init__(self, sim: IntermittentDevice, bundle: SwmBundle, model: int, programs=None):
        if not 0 <= model < bundle.num_models:
            raise IndexError(f"model index {model} out of range for {bundle.num_models} models")
        self.sim = sim
        self.net = bundle.net
        self.shapes = self.net.shapes()
        self.model = model
        self.programs = layer_programs(bundle, model) if programs is None else programs
        self.modes = layer_modes(bundle, model, sim.device)
        self.checkpoints = 0

    def _element(self, li: int, act: np.ndarray, e: int) -> tuple[np.float32, float]:
        layer = self.net.layers[li]
        prog = self.programs[li]
        dev = self.sim.device
        out_shape = self.shapes[li + 1]
        if isinstance(layer, Pool):
            c, rem = divmod(e, out_shape[1] * out_shape[2])
            i, j = divmod(rem, out_shape[2])
            k = layer.size
            win = act[c, i * k : (i + 1) * k, j * k : (j + 1) * k]
            return np.float32(win.max() if layer.kind == "max" else win.mean()), k * k * dev.pool_op_time_s
        if isinstance(layer, Conv):
            o, rem = divmod(e, out_shape[1] * out_shape[2])
            i, j = divmod(rem, out_shape[2])
            lo, hi = prog.starts[o], prog.starts[o + 1]
            s = layer.stride
            xs = act[prog.src[lo:hi], i * s + prog.dr[lo:hi], j * s + prog.dc[lo:hi]]
            val = np.float32(np.dot(xs, prog.values[lo:hi]) + prog.bias[o])
        else:
            lo, hi = prog.starts[e], prog.starts[e + 1]
            val = np.float32(np.dot(act.reshape(-1)[prog.src[lo:hi]], prog.values[lo:hi]) + prog.bias[e])
        if layer.activation == "relu":
            val = max(val, np.float32(0))
        return val, (hi - lo) * dev.mac_time_s[self.modes[li]]

    def run(self, x: np.ndarray) -> np.ndarray:
        sim, dev = self.sim, self.sim.device
        act = np.asarray(x, dtype=np.float32)
        if act.shape != self.net.input_shape:
            raise ShapeError(f"layer 0: expected input of shape {self.net.input_shape}, got {act.shape}")
        ckpt = Checkpoint(0, 0, np.zeros(0, dtype=np.float32), self.model)
        state: dict = {}
        need_restore = False

        def take_checkpoint():
            nonlocal ckpt
            idx = state["index"]
            # every item keeps this much energy in reserve, so no check is needed
            sim._spend(dev.checkpoint_time(idx))
            ckpt = Checkpoint(ckpt.layer, idx, state["partial"][:idx].copy(), self.model)
            self.checkpoints += 1
            sim.checkpoints += 1
            sim._log("checkpoint", f"model={self.model} layer={ckpt.layer} index={idx}")

        n_layers = len(self.net.layers)
        while ckpt.layer < n_layers:
            li = ckpt.layer
            if need_restore:
                if not sim.run_item(dev.restore_time(ckpt.index), dev.checkpoint_time(ckpt.index)):
                    continue
                sim._log("restore", f"model={self.model} layer={li} index={ckpt.index}")
                need_restore = False
            size = int(np.prod(self.shapes[li + 1]))
            partial = np.zeros(size, dtype=np.float32)
            partial[: ckpt.index] = ckpt.partial
            state["partial"], state["index"] = partial, ckpt.index
            if ckpt.index == 0 and not sim.run_item(dev.layer_overhead_s[self.modes[li]], dev.checkpoint_time(0)):
                need_restore = True
                continue
            while state["index"] < size:
                e = state["index"]
                val, cost = self._element(li, act, e)
                if not sim.run_item(cost, dev.checkpoint_time(e + 1), take_checkpoint):
                    break
                partial[e] = val
                state["index"] = e + 1
                failure = sim.failure_hook(sim.items) if sim.failure_hook else None
                if failure == "checkpoint":
                    take_checkpoint()
                    sim.power_off("injected")
                    break
                if failure == "abrupt":
                    sim.power_off("injected_abrupt")
                    break
            if state["index"] < size:
                need_restore = True
                continue
            # layer done: its output is committed to non-volatile memory
            act = partial.reshape(self.shapes[li + 1])
            ckpt = Checkpoint(li + 1, 0, np.zeros(0, dtype=np.float32), self.model)
        return act.reshape(-1)


def _infer(sim: IntermittentDevice, bundle: SwmBundle, model: int, x, inference: int, programs=None,
           prep_time_s: float = 0.0, weights_rewritten: int = 0) -> tuple[np.ndarray, RunReport]:
    start = sim.t
    ons_before = sim.power_ons
    was_on = sim.powered
    used_before = sim.energy_used
    ck_before = sim.checkpoints
    if prep_time_s > 0:
        sim.run_persistent(prep_time_s)
    scores = _InferenceRun(sim, bundle, model, programs).run(x)
    cycles = sim.power_ons - ons_before + (1 if was_on else 0)
    report = RunReport(inference, model, start, sim.t, cycles, sim.checkpoints - ck_before,
                       sim.energy_used - used_before, weights_rewritten, prep_time_s)
    return scores, report


def run_inference_intermittent(
    bundle: SwmBundle,
    model_index: int,
    x: np.ndarray,
    device: DeviceProfile,
    trace: PowerTrace,
    energy0: float = 0.0,
    horizon_s: float = 1e5,
    failure_hook: Optional[FailureHook] = None,
    return_events: bool = False,
):
    """One inference from an empty (or ``energy0``) buffer.

    Returns ``(scores, report)``, plus the event log when ``return_events``.
    """
    sim = IntermittentDevice(device, trace, energy0, horizon_s=horizon_s, failure_hook=failure_hook)
    scores, report = _infer(sim, bundle, model_index, x, 0)
    return (scores, report, sim.events) if return_events else (scores, report)


def bundle_kept_sets(bundle: SwmBundle, model: int) -> list[np.ndarray]:
    """Per weighted layer, the (K, positions) boolean kept map of one model."""
    out = []
    for l in bundle.layers:
        if l.weighted:
            stack = np.stack([np.array(p.bits, dtype=bool) for p in l.patterns])
            out.append(stack[l.location[:, model]])
    return out


def bundle_write_cost(bundle: SwmBundle, from_index: Optional[int], to_index: int, shared: bool = True) -> int:
    """Weights written to working memory when switching to ``to_index``."""
    if from_index == to_index:
        return 0
    dst = bundle_kept_sets(bundle, to_index)
    if from_index is None or not shared:
        return int(sum(d.sum() for d in dst))
    src = bundle_kept_sets(bundle, from_index)
    return int(sum((d & ~s).sum() for d, s in zip(dst, src)))


@dataclass
class AdaptiveRun:
    reports: list[RunReport]
    scores: list[np.ndarray]
    events: list[Event]

    @property
    def completion_s(self) -> float:
        return self.reports[-1].end_s

    @property
    def models_used(self) -> list[int]:
        return [r.model_index for r in self.reports]

    def to_csv(self) -> str:
        return reports_to_csv(self.reports)


STORAGE_MODES = ("swm", "reload", "offchip")


def run_adaptive(
    bundle: SwmBundle,
    inputs: Sequence[np.ndarray],
    device: DeviceProfile,
    trace: PowerTrace,
    policy: Union[str, int] = "adaptive",
    storage: str = "swm",
    shared_writes: bool = True,
    energy0: float = 0.0,
    horizon_s: float = 1e5,
) -> AdaptiveRun:
    """Run a workload, choosing each inference's model from the tracked energy level.

    ``storage`` sets what a model switch costs:

    - ``swm``: all models share one on-chip bundle; a switch writes only the
      weights the new model keeps and the old one lacks (all of them when
      ``shared_writes`` is False) and extracts the new model's weights.
    - ``reload``: one pruned model fits on chip; a switch loads the whole
      target model from off-chip memory.
    - ``offchip``: nothing stays on chip; every inference loads its model
      from off-chip memory.

    ``policy`` is ``"adaptive"`` or a fixed model index.
    """
    if len(inputs) == 0:
        raise ValueError("need at least one input")
    if storage not in STORAGE_MODES:
        raise ValueError(f"unknown storage mode {storage!r}")
    n = bundle.num_models
    if policy != "adaptive":
        policy = int(policy)
        if not 0 <= policy < n:
            raise IndexError(f"model index {policy} out of range for {n} models")
    sim = IntermittentDevice(device, trace, energy0, horizon_s=horizon_s)
    programs = {}
    # at deployment the model the cold-start level picks is already resident
    resident = adaptive_select(sim.tracker.classification, n) if policy == "adaptive" else policy
    if storage == "offchip":
        resident = None
    reports, scores = [], []
    for idx, x in enumerate(inputs):
        model = adaptive_select(sim.tracker.classification, n) if policy == "adaptive" else policy
        prep, written = 0.0, 0
        if storage == "offchip":
            written = bundle_write_cost(bundle, None, model)
            prep = written * device.offchip_time_per_weight_s
        elif model != resident:
            if storage == "swm":
                written = bundle_write_cost(bundle, resident, model, shared_writes)
                prep = written * device.write_time_per_weight_s + extraction_time(bundle, model, device)
            else:
                written = bundle_write_cost(bundle, None, model)
                prep = written * device.offchip_time_per_weight_s
            sim._log("switch", f"from={resident} to={model} weights={written}")
            resident = model
        if model not in programs:
            programs[model] = layer_programs(bundle, model)
        s, rep = _infer(sim, bundle, model, x, idx, programs[model], prep, written)
        sim._log("inference_done", f"inference={idx} model={model}")
        reports.append(rep)
        scores.append(s)
    return AdaptiveRun(reports, scores, sim.events)


def steady_cycle_duration(device: DeviceProfile, power_w: float, bundle: SwmBundle, x: np.ndarray,
                          model: Optional[int] = None, inferences: int = 3) -> float:
    """Mean power-on to power-on interval while running back-to-back inferences at constant power."""
    model = bundle.num_models - 1 if model is None else model
    sim = IntermittentDevice(device, PowerTrace.constant(power_w))
    programs = layer_programs(bundle, model)
    ons = []
    for i in range(inferences):
        _infer(sim, bundle, model, x, i, programs)
    ons = [e.t for e in sim.events if e.event == "power_on"]
    if len(ons) < 3:
        raise ValueError(f"too few power cycles at {power_w} W to measure a duration")
    gaps = np.diff(ons[1:])
    return float(gaps.mean())


def calibrate_bands(device: DeviceProfile, bundle: SwmBundle, x: np.ndarray,
                    powers_w: Sequence[float] = (5e-3, 4e-3, 3e-3)) -> tuple[float, float]:
    """Band edges at the midpoints between the cycle durations of the high, medium and low traces."""
    hi, med, lo = (steady_cycle_duration(device, p, bundle, x) for p in powers_w)
    if not hi < med < lo:
        raise ValueError("cycle durations do not grow as power falls; cannot calibrate")
    return ((hi + med) / 2, (med + lo) / 2)


def no_prune_bundle(bundle: SwmBundle) -> SwmBundle:
    """One-model bundle of the dense backbone: every weight kept (pruned ones stored as zeros)."""
    from .codec import compress, reconstruct_dense

    dense = reconstruct_dense(bundle, bundle.num_models - 1)
    masks = [None if m is None else np.ones_like(m) for m in dense.masks]
    return compress([type(dense)(dense.net, dense.weights, dense.biases, masks)])


HIGH_MEDIUM_LOW_W = (5e-3, 4e-3, 3e-3)


def mixed_trace(segment_s: float = 3.0, levels: Sequence[float] = (5e-3, 3e-3, 4e-3, 3e-3, 5e-3, 3e-3)) -> PowerTrace:
    """Step trace cycling through harvest levels, ``segment_s`` seconds each."""
    return PowerTrace(tuple(i * segment_s for i in range(len(levels))), tuple(levels))
