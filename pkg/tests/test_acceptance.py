"""Acceptance criteria, one test each; every test prints a PASS/FAIL line."""
import itertools
import time
from pathlib import Path

import numpy as np
import pytest

from _helpers import random_net, random_shared_models
from conftest import ACCEPTANCE_LINES
from data.make_golden import GOLDEN
from swmkit.codec import (
    SwmFormatError,
    compress,
    condensed_forward,
    deserialize,
    extract_model,
    extract_with_trace,
    reconstruct_dense,
    serialize,
)
from swmkit.latency import MODES, default_profile, fit_profile, generate_calibration
from swmkit.patterns import Pattern, generate_pattern_space, uniform_assignment
from swmkit.runtime import (
    DeviceProfile,
    PowerTrace,
    measure_extraction_overhead,
    mixed_trace,
    no_prune_bundle,
    run_adaptive,
    run_inference_intermittent,
    time_to_energy,
)
from swmkit.search import (
    EpisodeEval,
    RewardConfig,
    SharedWeightEnvironment,
    Trajectory,
    action_space_size,
    compute_reward,
    init_controller,
    log_prob,
    log_prob_grad,
    patterns_valid,
    policy_gradient_update,
    run_episodes,
    search,
)
from swmkit.shared_training import build_mask_schedule, verify_sharing
from swmkit.tensor_nn import FC, Conv, TrainedModel, forward, init_model, to_kernels, toy_network

DATA = Path(__file__).parent / "data"


def record(n, ok, detail):
    line = f"criterion {n:2d} {'PASS' if ok else 'FAIL'}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def _oracle(ws, pd, po):
    union = np.array(pd.bits, dtype=bool)
    for p in po:
        union |= np.array(p.bits, dtype=bool)
    dense = np.full(pd.size, np.nan)
    dense[union] = ws
    return dense[np.array(pd.bits, dtype=bool)], union


def test_criterion_01_codec_roundtrip():
    rng = np.random.default_rng(1)
    t0 = time.time()
    cases = failures = 0
    for i in range(1008):
        kind = ("conv3", "conv5", "fc")[i % 3]
        n = 2 + (i // 3) % 4
        net = random_net(rng, kind)
        models = random_shared_models(rng, net, n, nested=bool(i % 2))
        back = deserialize(serialize(compress(models)))
        for k, m in enumerate(models):
            dense = reconstruct_dense(back, k)
            kernels = extract_model(back, k)
            for li in net.weighted_layers():
                layer = net.layers[li]
                if dense.weights[li].tobytes() != m.weights[li].tobytes():
                    failures += 1
                filt = [w[mk] for w, mk in zip(to_kernels(layer, m.weights[li]), to_kernels(layer, m.masks[li]))]
                if not all(np.array_equal(ck.values, f) for ck, f in zip(kernels[li], filt)):
                    failures += 1
        cases += 1
    elapsed = time.time() - t0
    record(1, failures == 0 and elapsed < 60, f"{cases} randomized bundles, {failures} mismatches, {elapsed:.1f}s")


def test_criterion_02_extraction_trace():
    P = Pattern.from_string
    ck, steps, _ = extract_with_trace(np.arange(1, 9, dtype=np.float32), P("110 111 011"),
                                      [P("010 010 000"), P("011 110 010")])
    worked = ck.values.tolist() == [1, 2, 4, 5, 6, 7, 8] and steps == [
        "take", "take", "skip", "take", "take", "take", "nothing", "take", "take"]
    rng = np.random.default_rng(2)
    bad = 0
    for _ in range(100):
        pats = []
        while len(pats) < 3:
            bits = rng.integers(0, 2, 9)
            if bits.any():
                pats.append(Pattern((3, 3), tuple(bits.tolist())))
        pd, po = pats[0], pats[1:]
        union = np.logical_or.reduce([np.array(p.bits, bool) for p in pats])
        ws = rng.standard_normal(int(union.sum()))
        want, _ = _oracle(ws, pd, po)
        ck, steps, _ = extract_with_trace(ws, pd, po)
        counts_ok = (steps.count("take") == pd.popcount
                     and steps.count("skip") == int(union.sum()) - pd.popcount
                     and steps.count("nothing") == pd.size - int(union.sum()))
        if not (np.array_equal(ck.values, want) and counts_ok):
            bad += 1
    record(2, worked and bad == 0, f"worked case {'ok' if worked else 'wrong'}, {100 - bad}/100 random triples match oracle")


def test_criterion_03_size_law(trained, bundle):
    rng = np.random.default_rng(3)
    bad = 0
    for i in range(300):
        net = random_net(rng, ("conv3", "conv5", "fc")[i % 3])
        models = random_shared_models(rng, net, 2 + i % 4)
        b = compress(models)
        for li in net.weighted_layers():
            layer = net.layers[li]
            union = np.logical_or.reduce([to_kernels(layer, m.masks[li]) for m in models])
            counts = union.reshape(len(union), -1).sum(axis=1)
            if not np.array_equal(b.layers[li].union_counts(), counts) or len(b.layers[li].payload) != counts.sum():
                bad += 1
    densest = trained["models"][-1]
    chain_ok = bundle.payload_size() == sum(int(densest.masks[i].sum()) for i in trained["net"].weighted_layers())
    record(3, bad == 0 and chain_ok,
           f"payload == union popcount in 300 cases ({bad} bad); nested chain payload {bundle.payload_size()} == densest model")


def test_criterion_04_condensed_execution(bundle):
    rng = np.random.default_rng(4)
    t0 = time.time()
    worst = 0.0
    x = rng.standard_normal((100,) + tuple(bundle.input_shape)).astype(np.float32)
    for k in range(bundle.num_models):
        dense = reconstruct_dense(bundle, k)
        worst = max(worst, float(np.abs(condensed_forward(bundle, k, x) - forward(dense, x)).max()))
    elapsed = time.time() - t0
    record(4, worst <= 1e-5 and elapsed < 60, f"max |condensed - dense| = {worst:.2e} over 100 inputs x 3 models")


def test_criterion_05_shared_training(trained):
    models, report = trained["models"], trained["report"]
    shared = verify_sharing(models)
    accs = [m.accuracy for m in report.models]  # ordered by decreasing sparsity
    ordered = all(accs[k] <= accs[k + 1] + 0.02 for k in range(len(accs) - 1))
    spars = [round(m.sparsity, 4) for m in report.models]
    record(5, shared and ordered, f"sharing bit-exact={shared}; sparsity {spars} accuracy {[round(a, 4) for a in accs]}")


def test_criterion_06_reward_grid():
    cfg = RewardConfig(2.0, 0.9, phi_pattern=7.0, phi_accuracy=2.0, phi_latency=3.0)
    lib = generate_pattern_space((3, 3), 44)
    valid, invalid = [1, 16, 31], [1, 1, 31]
    bad = 0
    for lat, acc, acts in itertools.product([1.0, 2.0, 3.0], [0.8, 0.9, 0.95], [valid, invalid]):
        got = compute_reward(EpisodeEval(acc, lat), cfg, acts, lib)
        if acts is invalid:
            want = -7.0
        elif lat < 2.0 and acc > 0.9:
            want = acc + (2.0 - lat) / 2.0
        elif lat < 2.0:
            want = -2.0
        elif acc > 0.9:
            want = -3.0
        else:
            want = -5.0
        bad += got != want
    example = compute_reward(EpisodeEval(0.95, 1.0), RewardConfig(2.0, 0.9), valid, lib)
    record(6, bad == 0 and example == pytest.approx(1.45), f"18-cell grid, {bad} mismatches; worked example {example:.2f}")


def test_criterion_07_policy_gradient():
    st_ = init_controller(4, seed=1)
    st_.params["Wo"] = np.random.default_rng(0).normal(0, 0.5, st_.params["Wo"].shape)
    acts = [2, 0, 3]
    g = log_prob_grad(st_.params, acts, 0.9)
    worst = 0.0
    for k, v in st_.params.items():
        num = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            p1 = {a: b.copy() for a, b in st_.params.items()}
            p2 = {a: b.copy() for a, b in st_.params.items()}
            p1[k][idx] += 1e-6
            p2[k][idx] -= 1e-6
            num[idx] = (log_prob(p1, acts, 0.9) - log_prob(p2, acts, 0.9)) / 2e-6
        if np.linalg.norm(num) > 0:
            worst = max(worst, np.linalg.norm(num - g[k]) / np.linalg.norm(num))
    st_.baseline = 0.3
    same = policy_gradient_update(st_, Trajectory(acts, [], 0.3))
    noop = all(np.array_equal(same.params[k], st_.params[k]) for k in st_.params)

    planted = [1, 3, 2]
    smoke = init_controller(4, seed=0, lr=0.2)
    _, recs = run_episodes(smoke, 3, lambda a: (1.0 if a == planted else -1.0, "", EpisodeEval(0.0, 0.0)), 300)
    r = np.array([x.reward for x in recs])
    first, last = r[:50].mean(), r[-50:].mean()
    record(7, worst <= 1e-4 and noop and last > first,
           f"grad rel err {worst:.1e}; zero-advantage no-op={noop}; reward first50 {first:.2f} -> last50 {last:.2f}")


def test_criterion_08_search(dataset):
    lib = generate_pattern_space((3, 3), {"high": 2, "medium": 2, "low": 2})
    env = SharedWeightEnvironment(toy_network(4), lib, dataset, epochs_search=2)
    cfg = RewardConfig(0.08, 0.4)
    table = {t: env.evaluate(t) for t in itertools.product(range(6), repeat=3)}
    feasible = [t for t, ev in table.items()
                if patterns_valid(t, lib) and ev.latency < cfg.latency_constraint and ev.accuracy > cfg.accuracy_constraint]
    hits = 0
    for seed in range(10):
        res = search(None, lib, None, cfg, env, max_episodes=300, seed=seed, finalize=False)
        hits += res.satisfied and tuple(res.episodes[-1].actions) in feasible
    space = action_space_size(44, 3)
    record(8, hits >= 9 and space == 85184 and len(table) == 216,
           f"{hits}/10 seeds satisfied within 300 episodes ({len(feasible)}/216 feasible triples); 44^3 = {space}")


def test_criterion_09_latency_predictor():
    samples = generate_calibration(noise=0.02, seed=0)
    r2 = fit_profile(samples).score(samples)
    prof = default_profile()
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(1000):
        if rng.random() < 0.6:
            c, k, hw = int(rng.integers(1, 17)), int(rng.choice([1, 3, 5])), int(rng.integers(5, 33))
            layer, shape = Conv(c, int(rng.integers(1, 33)), k, k), (c, hw, hw)
        else:
            n = int(rng.integers(1, 513))
            layer, shape = FC(int(rng.integers(1, 257)), n), (n,)
        lo, hi = np.sort(rng.uniform(0.01, 1.0, 2))
        for mode in MODES:
            a, b = prof.predict_layer(layer, shape, lo, mode), prof.predict_layer(layer, shape, hi, mode)
            bad += not (0 < a <= b)
        reg, irr, cpu = (prof.predict_layer(layer, shape, hi, m) for m in ("lea_regular", "lea_irregular", "cpu"))
        bad += not (reg <= irr <= cpu)
    record(9, r2 >= 0.99 and bad == 0, f"R^2 = {r2:.5f} on noisy calibration; {bad} invariant violations in 1000 layers")


def test_criterion_10_simulator_physics(bundle, dataset):
    dev = DeviceProfile()
    t = time_to_energy(0.0, 0.0, dev.energy_on, 0.0, PowerTrace.constant(3e-3), dev.energy_on)
    exact = 0.5 * 100e-6 * 3.3**2 / 3e-3
    e, te = 0.0, 0.0
    while e < dev.energy_on:
        e += 3e-3 * 1e-6
        te += 1e-6
    x = dataset.x_holdout[5]
    ref, _ = run_inference_intermittent(bundle, 1, x, dev, PowerTrace.constant(1.0), energy0=dev.energy_on)
    rng = np.random.default_rng(10)
    same = 0
    for trial in range(50):
        pts = set(rng.integers(1, 3000, size=int(rng.integers(1, 6))).tolist())
        kind = ("checkpoint", "abrupt")[trial % 2]
        s, _ = run_inference_intermittent(bundle, 1, x, dev, PowerTrace.constant(4e-3),
                                          failure_hook=lambda i: kind if i in pts else None)
        same += s.tobytes() == ref.tobytes()
    record(10, t == exact and abs(t - te) < 10e-6 and same == 50,
           f"charge time {t:.6f}s (analytic {exact:.6f}s, 1us steps {te:.6f}s); {same}/50 interrupted runs identical")


def test_criterion_11_intermittent_trend(bundle, dataset):
    dev = DeviceProfile()
    x = dataset.x_holdout[0]
    lat = {p: [run_inference_intermittent(bundle, k, x, dev, PowerTrace.constant(p))[1].latency_s
               for k in range(bundle.num_models)] for p in (5e-3, 4e-3, 3e-3)}
    ok = all(lat[3e-3][k] > lat[4e-3][k] > lat[5e-3][k] for k in range(bundle.num_models))
    detail = "; ".join(f"model {k}: " + "/".join(f"{lat[p][k]:.4f}" for p in (5e-3, 4e-3, 3e-3)) + "s"
                       for k in range(bundle.num_models))
    record(11, ok, f"latency at 5/4/3 mW {detail}")


def test_criterion_12_adaptive_speedup(bundle, dataset):
    dev = DeviceProfile()
    trace = mixed_trace()
    inputs = list(dataset.x_holdout[:40])
    t0 = time.time()
    swm = run_adaptive(bundle, inputs, dev, trace)
    reload_run = run_adaptive(bundle, inputs, dev, trace, storage="reload")
    dense = run_adaptive(no_prune_bundle(bundle), inputs, dev, trace, policy=0, storage="offchip")
    elapsed = time.time() - t0
    speedup = dense.completion_s / swm.completion_s
    ok = speedup >= 2.0 and swm.completion_s < reload_run.completion_s and elapsed < 300
    record(12, ok, f"40 inferences: swm {swm.completion_s:.3f}s, reload {reload_run.completion_s:.3f}s, "
                   f"no-prune {dense.completion_s:.3f}s; speedup {speedup:.2f}x")


def test_criterion_13_extraction_overhead(bundle):
    dev = DeviceProfile()
    net = toy_network(4)
    lib = generate_pattern_space((3, 3), 44)
    base = init_model(net, 0)
    chain = [1, 16, 31, 32, 33]

    def bundle_for(ids):
        sched = build_mask_schedule(net, [uniform_assignment(net, lib, i) for i in ids], lib)
        models = [TrainedModel(net, [None if w is None else np.where(m, w, 0).astype(np.float32)
                                     for w, m in zip(base.weights, masks)], base.biases, masks)
                  for masks in sched.full_masks]
        return compress(models)

    overheads = [measure_extraction_overhead(bundle_for(chain[:n]), dev) for n in (2, 3, 4, 5)]
    ref = measure_extraction_overhead(bundle, dev)
    ok = ref < 0.05 and all(o < 0.05 for o in overheads) and all(a < b for a, b in zip(overheads, overheads[1:]))
    record(13, ok, f"reference bundle {ref:.2%}; N=2..5 {', '.join(f'{o:.2%}' for o in overheads)}")


def test_criterion_14_format_stability():
    exact = all(serialize(build()) == (DATA / name).read_bytes() and deserialize((DATA / name).read_bytes()) == build()
                for name, build in GOLDEN.items())
    raw = (DATA / "conv3_models.swm").read_bytes()
    rng = np.random.default_rng(14)
    caught = 0
    for _ in range(100):
        flipped = bytearray(raw)
        flipped[int(rng.integers(0, len(raw)))] ^= 1 << int(rng.integers(0, 8))
        try:
            deserialize(bytes(flipped))
        except SwmFormatError:
            caught += 1
    record(14, exact and caught == 100, f"golden files byte-exact={exact}; {caught}/100 single-bit flips detected")
