import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swmkit.codec import compress, condensed_forward
from swmkit.runtime import (
    DeviceProfile,
    EnergyState,
    Event,
    HorizonExceeded,
    IntermittentDevice,
    PowerTrace,
    adaptive_select,
    advance_energy,
    bundle_write_cost,
    calibrate_bands,
    classify_cycles,
    energy_tracker_update,
    events_to_csv,
    extraction_time,
    measure_extraction_overhead,
    mixed_trace,
    reports_to_csv,
    run_adaptive,
    run_inference_intermittent,
    simulate_power,
    steady_cycle_duration,
    time_to_energy,
)

DEV = DeviceProfile()


def euler_charge_time(cap_f, v, power_w, dt=1e-6):
    """Step the buffer energy in fixed increments until the turn-on energy."""
    target = 0.5 * cap_f * v * v
    e, t = 0.0, 0.0
    while e < target:
        e += power_w * dt
        t += dt
    return t


def test_profile_validation_and_json(tmp_path):
    with pytest.raises(ValueError):
        DeviceProfile(v_on=1.0, v_off=1.8)
    with pytest.raises(ValueError):
        DeviceProfile(checkpoint_time_s=-1.0)
    with pytest.raises(ValueError):
        DeviceProfile(compute_mode="gpu")
    dev = DeviceProfile(compute_mode="lea", safety_factor=2.0)
    dev.save(tmp_path / "d.json")
    assert DeviceProfile.load(tmp_path / "d.json") == dev


def test_trace_validation_and_csv(tmp_path):
    with pytest.raises(ValueError):
        PowerTrace((1.0,), (1e-3,))
    with pytest.raises(ValueError):
        PowerTrace((0.0, 2.0, 1.0), (1e-3, 1e-3, 1e-3))
    with pytest.raises(ValueError):
        PowerTrace((0.0,), (-1e-3,))
    tr = mixed_trace()
    (tmp_path / "t.csv").write_text(tr.to_csv())
    assert PowerTrace.load(tmp_path / "t.csv") == tr
    assert tr.power_at(3.5) == 3e-3 and tr.power_at(100.0) == 3e-3


def test_charge_time_is_closed_form():
    t = time_to_energy(0.0, 0.0, DEV.energy_on, 0.0, PowerTrace.constant(3e-3), DEV.energy_on)
    assert t == 0.5 * 100e-6 * 3.3**2 / 0.003
    assert abs(t - euler_charge_time(100e-6, 3.3, 3e-3)) < 10e-6


def test_equilibrium_produces_no_events():
    # harvest equals load: the buffer never moves
    ev = simulate_power(DEV, PowerTrace.constant(DEV.active_power_w), PowerTrace.constant(DEV.active_power_w), 10.0,
                        energy0=DEV.energy_on)
    assert ev == []


def test_zero_harvest_raises():
    with pytest.raises(HorizonExceeded):
        simulate_power(DEV, PowerTrace.constant(0.0), PowerTrace.constant(DEV.active_power_w), 10.0)
    with pytest.raises(HorizonExceeded):
        IntermittentDevice(DEV, PowerTrace.constant(0.0)).ensure_on()


def test_power_events_alternate_and_match_closed_form():
    ev = simulate_power(DEV, PowerTrace.constant(3e-3), PowerTrace.constant(DEV.active_power_w), 2.0)
    kinds = [e.event for e in ev]
    assert kinds[0] == "power_on"
    assert all(a != b for a, b in zip(kinds, kinds[1:]))
    charge = DEV.energy_on / 3e-3
    drain = (DEV.energy_on - DEV.energy_off) / (DEV.active_power_w - 3e-3)
    recharge = (DEV.energy_on - DEV.energy_off) / 3e-3
    assert ev[0].t == pytest.approx(charge, rel=1e-12)
    assert ev[1].t == pytest.approx(charge + drain, rel=1e-12)
    assert ev[2].t == pytest.approx(charge + drain + recharge, rel=1e-12)


@given(st.floats(0, 0.01), st.floats(1e-4, 0.5), st.floats(0, 0.03), st.floats(0, 2.0))
def test_energy_is_conserved_across_segments(e0, duration, load, split):
    tr = PowerTrace((0.0, 0.1, 0.3), (4e-3, 1e-3, 6e-3))
    cap = 1.0  # out of reach, so nothing is clipped
    once = advance_energy(e0, 0.05, duration, load, tr, cap)
    part = min(split * duration, duration)
    twice = advance_energy(advance_energy(e0, 0.05, part, load, tr, cap), 0.05 + part, duration - part, load, tr, cap)
    assert twice == pytest.approx(once, abs=1e-15)
    harvested = sum(p * max(0.0, min(0.05 + duration, hi) - max(0.05, lo))
                    for lo, hi, p in [(0, 0.1, 4e-3), (0.1, 0.3, 1e-3), (0.3, math.inf, 6e-3)])
    assert once == pytest.approx(e0 + harvested - load * duration, abs=1e-12)


def test_tracker_and_selection():
    bands = (0.1, 0.2)
    s = EnergyState()
    for d in (0.3, 0.3):
        s = energy_tracker_update(s, d, bands)
        assert s.classification == "high"
    s = energy_tracker_update(s, 0.3, bands)
    assert s.classification == "low"
    for d in (0.15, 0.15, 0.15):
        s = energy_tracker_update(s, d, bands)
    assert s.classification == "medium" and s.history == (0.15, 0.15, 0.15)
    with pytest.raises(ValueError):
        energy_tracker_update(s, 0.0, bands)
    assert classify_cycles(0.05, bands) == "high"
    assert [adaptive_select(c, 3) for c in ("low", "medium", "high")] == [0, 1, 2]
    assert [adaptive_select(c, 5) for c in ("low", "medium", "high")] == [0, 2, 4]
    assert [adaptive_select(c, 2) for c in ("low", "medium", "high")] == [0, 1, 1]
    assert adaptive_select("medium", 1) == 0
    with pytest.raises(ValueError):
        adaptive_select("extreme", 3)


def test_abundant_power_runs_in_one_cycle(bundle, dataset):
    x = dataset.x_holdout[0]
    for k in range(3):
        scores, rep = run_inference_intermittent(bundle, k, x, DEV, PowerTrace.constant(1.0), energy0=DEV.energy_on)
        assert rep.cycles == 1 and rep.checkpoints == 0
        np.testing.assert_allclose(scores, condensed_forward(bundle, k, x), rtol=1e-5, atol=1e-5)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 3000), min_size=1, max_size=6), st.sampled_from(["checkpoint", "abrupt"]), st.integers(0, 2))
def test_interruptions_do_not_change_results(bundle, dataset, points, kind, model):
    x = dataset.x_holdout[3]
    ref, _ = run_inference_intermittent(bundle, model, x, DEV, PowerTrace.constant(1.0), energy0=DEV.energy_on)
    pts = set(points)
    scores, rep, ev = run_inference_intermittent(bundle, model, x, DEV, PowerTrace.constant(4e-3),
                                                 failure_hook=lambda i: kind if i in pts else None, return_events=True)
    assert scores.tobytes() == ref.tobytes()
    seq = [e.event for e in ev if e.event in ("power_on", "power_off")]
    assert all(a != b for a, b in zip(seq, seq[1:]))


def test_intermittent_run_checkpoints_and_restores(bundle, dataset):
    _, rep, ev = run_inference_intermittent(bundle, 2, dataset.x_holdout[0], DEV, PowerTrace.constant(3e-3),
                                            return_events=True)
    kinds = {e.event for e in ev}
    assert rep.cycles > 1 and rep.checkpoints >= 1
    assert {"checkpoint", "restore", "power_off"} <= kinds


def test_lower_power_is_slower(bundle, dataset):
    x = dataset.x_holdout[0]
    lat = [run_inference_intermittent(bundle, 1, x, DEV, PowerTrace.constant(p))[1].latency_s for p in (5e-3, 3e-3)]
    assert lat[0] < lat[1]


def test_constant_high_power_keeps_densest(bundle, dataset):
    run = run_adaptive(bundle, list(dataset.x_holdout[:6]), DEV, PowerTrace.constant(5e-3))
    assert run.models_used == [2] * 6
    assert all(r.weights_rewritten == 0 for r in run.reports)


def test_power_drop_switches_to_sparser(bundle, dataset):
    trace = PowerTrace((0.0, 1.0), (5e-3, 3e-3))
    run = run_adaptive(bundle, list(dataset.x_holdout[:20]), DEV, trace)
    assert run.models_used[0] == 2
    assert 0 in run.models_used
    first = run.models_used.index(0)
    assert run.reports[first].start_s >= 1.0


def test_shared_switches_write_less(bundle):
    shared = bundle_write_cost(bundle, 0, 2)
    full = bundle_write_cost(bundle, 0, 2, shared=False)
    assert 0 < shared < full
    assert bundle_write_cost(bundle, 2, 0) == 0
    assert bundle_write_cost(bundle, 1, 1) == 0


def test_extraction_overhead(trained, bundle):
    single = compress(trained["models"][2:])
    zero = DeviceProfile(extract_time_per_step_s=0, extract_time_per_check_s=0, index_read_time_s=0)
    assert measure_extraction_overhead(bundle, zero) == 0.0
    assert measure_extraction_overhead(bundle, DEV) < 0.05
    assert extraction_time(single, 0, DEV) > 0


def test_calibrated_bands_classify_the_three_levels(bundle, dataset):
    x = dataset.x_holdout[0]
    bands = calibrate_bands(DEV, bundle, x)
    assert bands == pytest.approx(DEV.cycle_bands_s, abs=1e-4)
    levels = [classify_cycles(steady_cycle_duration(DEV, p, bundle, x), DEV.cycle_bands_s) for p in (5e-3, 4e-3, 3e-3)]
    assert levels == ["high", "medium", "low"]


def test_csv_headers(bundle, dataset):
    run = run_adaptive(bundle, list(dataset.x_holdout[:2]), DEV, PowerTrace.constant(5e-3))
    assert run.to_csv().splitlines()[0] == ("inference,model_index,start_s,end_s,latency_s,cycles,checkpoints,"
                                            "energy_j,weights_rewritten,switch_time_s")
    assert reports_to_csv(run.reports) == run.to_csv()
    assert events_to_csv([Event(0.5, "power_on", "x")]) == "t_s,event,detail\n0.500000000,power_on,x\n"


def test_bad_arguments(bundle, dataset):
    x = dataset.x_holdout[0]
    with pytest.raises(ValueError):
        run_adaptive(bundle, [x], DEV, PowerTrace.constant(5e-3), storage="cloud")
    with pytest.raises(IndexError):
        run_adaptive(bundle, [x], DEV, PowerTrace.constant(5e-3), policy=3)
    with pytest.raises(IndexError):
        run_inference_intermittent(bundle, 5, x, DEV, PowerTrace.constant(5e-3))
    with pytest.raises(ValueError):
        IntermittentDevice(DEV, PowerTrace.constant(5e-3), energy0=1.0)
