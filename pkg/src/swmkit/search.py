"""Reinforcement-learning search over per-model pruning patterns.

A small Elman RNN samples one library pattern id per model slot, each step
conditioned on the previous choice. Episodes are scored by training the
shared-weight sequence (accuracy) and by the latency predictor, and the
policy is updated with REINFORCE against a moving-average baseline.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Optional, Protocol, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_images_labels
from .latency import LatencyPredictor, default_profile
from .patterns import PatternLibrary, uniform_assignment
from .shared_training import SharedTrainingReport, TrainConfig, build_mask_schedule, train_shared_sequence
from .tensor_nn import Dataset, NetworkDef, TrainedModel, toy_network

HIDDEN = 35
PARAM_NAMES = ("Wx", "Wh", "bh", "Wo", "bo", "start")


@dataclass
class ControllerState:
    """Recurrent policy parameters, reward baseline and sampling RNG."""

    params: dict
    baseline: float = 0.0
    beta: float = 0.9
    lr: float = 5e-3
    baseline_decay: float = 0.9
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))

    @property
    def n_actions(self) -> int:
        return self.params["bo"].shape[0]

    def copy(self) -> "ControllerState":
        return ControllerState({k: v.copy() for k, v in self.params.items()}, self.baseline, self.beta, self.lr,
                               self.baseline_decay, self.rng)


def init_controller(n_actions: int, seed: int = 0, hidden: int = HIDDEN, beta: float = 0.9, lr: float = 5e-3,
                    baseline_decay: float = 0.9, init_scale: float = 0.1) -> ControllerState:
    """Output layer starts at zero, so the first policy is uniform at every step."""
    if n_actions < 1:
        raise ValueError("library must be nonempty")
    rng = np.random.default_rng(seed)
    u = lambda *shape: rng.uniform(-init_scale, init_scale, size=shape)
    params = {
        "Wx": u(hidden, n_actions),
        "Wh": u(hidden, hidden),
        "bh": np.zeros(hidden),
        "Wo": np.zeros((n_actions, hidden)),
        "bo": np.zeros(n_actions),
        "start": u(n_actions),
    }
    return ControllerState(params, 0.0, beta, lr, baseline_decay, rng)


@dataclass
class Trajectory:
    actions: list[int]
    log_probs: list[float]
    reward: Optional[float] = None


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def _rollout(params: dict, actions: Sequence[int]):
    """Hidden states, inputs and step distributions for a fixed action sequence."""
    p_n = params["bo"].shape[0]
    h = np.zeros(params["Wh"].shape[0])
    xs, hs, probs = [], [h], []
    x = params["start"]
    for a in actions:
        h = np.tanh(params["Wx"] @ x + params["Wh"] @ h + params["bh"])
        xs.append(x)
        hs.append(h)
        probs.append(_softmax(params["Wo"] @ h + params["bo"]))
        x = np.zeros(p_n)
        x[a] = 1.0
    return xs, hs, probs


def step_probabilities(state: ControllerState, actions: Sequence[int]) -> list[np.ndarray]:
    """Policy distribution at each step given the preceding actions."""
    return _rollout(state.params, actions)[2]


def sample_actions(state: ControllerState, n_slots: int) -> Trajectory:
    if n_slots < 1:
        raise ValueError("need at least one model slot")
    p = state.params
    n = state.n_actions
    h = np.zeros(p["Wh"].shape[0])
    x = p["start"]
    actions, logps = [], []
    for _ in range(n_slots):
        h = np.tanh(p["Wx"] @ x + p["Wh"] @ h + p["bh"])
        probs = _softmax(p["Wo"] @ h + p["bo"])
        a = int(state.rng.choice(n, p=probs))
        actions.append(a)
        logps.append(float(np.log(probs[a])))
        x = np.zeros(n)
        x[a] = 1.0
    return Trajectory(actions, logps)


def log_prob(params: dict, actions: Sequence[int], beta: float = 1.0) -> float:
    """Discounted sum of step log-probabilities, weight ``beta**(S - s)`` at step ``s``."""
    probs = _rollout(params, actions)[2]
    s_total = len(actions)
    return float(sum(beta ** (s_total - 1 - i) * np.log(probs[i][a]) for i, a in enumerate(actions)))


def log_prob_grad(params: dict, actions: Sequence[int], beta: float = 1.0) -> dict:
    """Gradient of :func:`log_prob` with respect to every parameter (backprop through time)."""
    xs, hs, probs = _rollout(params, actions)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    s_total = len(actions)
    dh_next = np.zeros_like(hs[0])
    for i in reversed(range(s_total)):
        w = beta ** (s_total - 1 - i)
        dlogits = -w * probs[i]
        dlogits[actions[i]] += w
        h, h_prev = hs[i + 1], hs[i]
        grads["Wo"] += np.outer(dlogits, h)
        grads["bo"] += dlogits
        dh = params["Wo"].T @ dlogits + dh_next
        dz = dh * (1.0 - h**2)
        grads["Wx"] += np.outer(dz, xs[i])
        grads["Wh"] += np.outer(dz, h_prev)
        grads["bh"] += dz
        if i == 0:
            grads["start"] += params["Wx"].T @ dz
        dh_next = params["Wh"].T @ dz
    return grads


def policy_gradient_update(state: ControllerState, trajectory: Trajectory) -> ControllerState:
    """One REINFORCE step with batch size 1, then the baseline moves toward the reward."""
    if trajectory.reward is None:
        raise ValueError("trajectory has no reward")
    reward = float(trajectory.reward)
    if not np.isfinite(reward):
        raise FloatingPointError("reward is not finite")
    grads = log_prob_grad(state.params, trajectory.actions, state.beta)
    if not all(np.isfinite(g).all() for g in grads.values()):
        raise FloatingPointError("policy gradient is not finite")
    new = state.copy()
    advantage = reward - state.baseline
    if advantage != 0.0:
        for k in new.params:
            new.params[k] = new.params[k] + state.lr * advantage * grads[k]
    new.baseline = state.baseline_decay * state.baseline + (1.0 - state.baseline_decay) * reward
    return new


@dataclass(frozen=True)
class RewardConfig:
    """Latency bound (seconds), accuracy bound, and the three penalties.

    The accuracy bound only has to be positive: a bound above 1 is a valid
    way to ask for an unreachable target.
    """

    latency_constraint: float
    accuracy_constraint: float
    phi_pattern: float = 1.0
    phi_accuracy: float = 1.0
    phi_latency: float = 1.0

    def __post_init__(self):
        vals = (self.latency_constraint, self.accuracy_constraint, self.phi_pattern, self.phi_accuracy, self.phi_latency)
        if not all(v > 0 for v in vals):
            raise ValueError("constraints and penalties must be positive")

    @classmethod
    def from_dict(cls, d: dict) -> "RewardConfig":
        allowed = set(cls.__dataclass_fields__)
        unknown = set(d) - allowed
        if unknown:
            raise ValueError(f"unknown reward config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class EpisodeEval:
    """Lowest accuracy and largest latency over the episode's models."""

    accuracy: float
    latency: float
    patterns_valid: bool = True


def patterns_valid(actions: Sequence[int], library: PatternLibrary) -> bool:
    """Distinct pattern ids, each from a different sparsity band."""
    bands = [library.band(a) for a in actions]
    return len(set(actions)) == len(actions) and len(set(bands)) == len(bands)


def reward_case(ev: EpisodeEval, cfg: RewardConfig, actions=None, library: Optional[PatternLibrary] = None) -> str:
    """Exactly one of ``pattern``, ``satisfied``, ``accuracy``, ``latency``, ``both``."""
    valid = ev.patterns_valid
    if actions is not None and library is not None:
        valid = valid and patterns_valid(actions, library)
    if not valid:
        return "pattern"
    lat_ok = ev.latency < cfg.latency_constraint
    acc_ok = ev.accuracy > cfg.accuracy_constraint
    if lat_ok and acc_ok:
        return "satisfied"
    if lat_ok:
        return "accuracy"
    if acc_ok:
        return "latency"
    return "both"


def compute_reward(ev: EpisodeEval, cfg: RewardConfig, actions=None, library: Optional[PatternLibrary] = None) -> float:
    case = reward_case(ev, cfg, actions, library)
    if case == "pattern":
        return -cfg.phi_pattern
    if case == "satisfied":
        return ev.accuracy + (cfg.latency_constraint - ev.latency) / cfg.latency_constraint
    if case == "accuracy":
        return -cfg.phi_accuracy
    if case == "latency":
        return -cfg.phi_latency
    return -(cfg.phi_accuracy + cfg.phi_latency)


def action_space_size(n_patterns: int, n_models: int) -> int:
    return n_patterns**n_models


class Environment(Protocol):
    def evaluate(self, actions: Sequence[int]) -> EpisodeEval: ...


class SharedWeightEnvironment:
    """Scores a set of pattern choices by shared-weight training plus predicted latency.

    The chosen patterns are ordered by decreasing sparsity and applied
    uniformly to every prunable kernel of their model. Results are cached
    per pattern set.
    """

    def __init__(
        self,
        net: NetworkDef,
        library: PatternLibrary,
        data: Dataset,
        predictor: Optional[LatencyPredictor] = None,
        mode: str = "cpu",
        epochs_search: int = 2,
        epochs_final: int = 5,
        lr: float = 0.05,
        batch_size: int = 32,
        seed: int = 0,
    ):
        if epochs_search > epochs_final:
            raise ValueError("search budget must not exceed the final training budget")
        self.net = net
        self.library = library
        self.data = data
        self.predictor = default_profile() if predictor is None else predictor
        self.mode = mode
        self.epochs_search = epochs_search
        self.epochs_final = epochs_final
        self.lr = lr
        self.batch_size = batch_size
        self.seed = seed
        self.cache: dict[tuple[int, ...], EpisodeEval] = {}
        self.trainings = 0

    def ordered(self, actions: Sequence[int]) -> list[int]:
        return sorted(actions, key=lambda a: (-self.library[a].sparsity(), a))

    def schedule(self, actions: Sequence[int]):
        ids = self.ordered(actions)
        return build_mask_schedule(self.net, [uniform_assignment(self.net, self.library, i) for i in ids], self.library)

    def latency(self, schedule) -> list[float]:
        return [self.predictor.predict_masks(self.net, m, self.mode) for m in schedule.full_masks]

    def _train(self, actions: Sequence[int], epochs: int):
        schedule = self.schedule(actions)
        cfg = TrainConfig(epochs, self.lr, self.batch_size, self.seed)
        models, report = train_shared_sequence(self.net, schedule, self.data, cfg)
        for m, lat in zip(report.models, self.latency(schedule)):
            m.latency_predicted = lat
        self.trainings += 1
        return schedule, models, report

    def evaluate(self, actions: Sequence[int]) -> EpisodeEval:
        key = tuple(sorted(actions))
        if key in self.cache:
            return self.cache[key]
        if not patterns_valid(actions, self.library):
            # penalised regardless of accuracy; skip training
            ev = EpisodeEval(0.0, max(self.latency(self.schedule(actions))), False)
        else:
            _, _, report = self._train(actions, self.epochs_search)
            ev = EpisodeEval(min(m.accuracy for m in report.models), max(m.latency_predicted for m in report.models))
        self.cache[key] = ev
        return ev

    def finalize(self, actions: Sequence[int]):
        """Retrain the chosen set at the final budget: ``(ordered ids, models, report)``."""
        _, models, report = self._train(actions, self.epochs_final)
        return self.ordered(actions), models, report


@dataclass
class EpisodeRecord:
    episode: int
    actions: list[int]
    accuracy: float
    latency: float
    reward: float
    case: str


def episodes_to_csv(records: Sequence[EpisodeRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["episode", "action_ids", "A", "L", "reward", "case"])
    for r in records:
        w.writerow([r.episode, "-".join(str(a) for a in r.actions), f"{r.accuracy:.6f}", f"{r.latency:.9g}",
                    f"{r.reward:.6f}", r.case])
    return buf.getvalue()


@dataclass
class SearchResult:
    actions: list[int]
    satisfied: bool
    reward: float
    episodes: list[EpisodeRecord]
    state: ControllerState
    models: Optional[list[TrainedModel]] = None
    report: Optional[SharedTrainingReport] = None

    def to_dict(self) -> dict:
        return {"pattern_ids": list(self.actions), "satisfied": self.satisfied, "reward": self.reward,
                "episodes": len(self.episodes)}


def run_episodes(state: ControllerState, n_slots: int, reward_fn: Callable[[list[int]], tuple[float, str, EpisodeEval]],
                 max_episodes: int, stop_when: Optional[Callable[[str], bool]] = None):
    """Sample, score and update; returns ``(state, records)``.

    Stops early when ``stop_when(case)`` is true for an episode.
    """
    records = []
    for ep in range(max_episodes):
        traj = sample_actions(state, n_slots)
        try:
            reward, case, ev = reward_fn(traj.actions)
        except Exception as exc:
            raise RuntimeError(f"episode {ep}: environment failed: {exc}") from exc
        traj.reward = reward
        state = policy_gradient_update(state, traj)
        records.append(EpisodeRecord(ep, list(traj.actions), ev.accuracy, ev.latency, reward, case))
        if stop_when is not None and stop_when(case):
            break
    return state, records


def search(
    net: NetworkDef,
    library: PatternLibrary,
    data: Optional[Dataset],
    cfg: RewardConfig,
    env: Optional[Environment] = None,
    max_episodes: int = 300,
    n_models: int = 3,
    seed: int = 0,
    beta: float = 0.9,
    lr: float = 5e-3,
    finalize: bool = True,
) -> SearchResult:
    """Search until a candidate meets both constraints or the episode cap is reached.

    Without a satisfying candidate the best-reward one is returned with
    ``satisfied=False``. With ``finalize`` and an environment that supports
    it, the returned models are retrained at the final budget.
    """
    if n_models < 2:
        raise ValueError("need at least two model slots")
    if env is None:
        if data is None:
            raise ValueError("give a dataset or an environment")
        env = SharedWeightEnvironment(net, library, data, seed=seed)
    state = init_controller(len(library), seed=seed, beta=beta, lr=lr)

    def reward_fn(actions):
        ev = env.evaluate(actions)
        return compute_reward(ev, cfg, actions, library), reward_case(ev, cfg, actions, library), ev

    state, records = run_episodes(state, n_models, reward_fn, max_episodes, lambda case: case == "satisfied")
    last = records[-1]
    if last.case == "satisfied":
        best, satisfied = last, True
    else:
        best, satisfied = max(records, key=lambda r: (r.reward, -r.episode)), False
    result = SearchResult(list(best.actions), satisfied, best.reward, records, state)
    if finalize and hasattr(env, "finalize"):
        ordered, models, report = env.finalize(best.actions)
        result.actions, result.models, result.report = ordered, models, report
    return result


class PatternSearch(BaseEstimator):
    """Estimator wrapper around :func:`search` with a shared-weight environment."""

    def __init__(
        self,
        library: Optional[PatternLibrary] = None,
        network: Optional[NetworkDef] = None,
        n_models: int = 3,
        latency_constraint: float = 1.0,
        accuracy_constraint: float = 0.5,
        phi_pattern: float = 1.0,
        phi_accuracy: float = 1.0,
        phi_latency: float = 1.0,
        beta: float = 0.9,
        lr: float = 5e-3,
        max_episodes: int = 300,
        epochs_search: int = 2,
        epochs_final: int = 5,
        train_lr: float = 0.05,
        mode: str = "cpu",
        random_state: int = 0,
    ):
        self.library = library
        self.network = network
        self.n_models = n_models
        self.latency_constraint = latency_constraint
        self.accuracy_constraint = accuracy_constraint
        self.phi_pattern = phi_pattern
        self.phi_accuracy = phi_accuracy
        self.phi_latency = phi_latency
        self.beta = beta
        self.lr = lr
        self.max_episodes = max_episodes
        self.epochs_search = epochs_search
        self.epochs_final = epochs_final
        self.train_lr = train_lr
        self.mode = mode
        self.random_state = random_state

    def fit(self, X, y, X_holdout=None, y_holdout=None):
        X, y = check_images_labels(X, y)
        if X_holdout is None:
            X_holdout, y_holdout = X, y
        else:
            X_holdout, y_holdout = check_images_labels(X_holdout, y_holdout)
        net = self.network or toy_network(int(y.max()) + 1, X.shape[-1])
        data = Dataset(X, y, X_holdout, y_holdout, net.num_classes)
        cfg = RewardConfig(self.latency_constraint, self.accuracy_constraint, self.phi_pattern, self.phi_accuracy,
                           self.phi_latency)
        env = SharedWeightEnvironment(net, self.library, data, mode=self.mode, epochs_search=self.epochs_search,
                                      epochs_final=self.epochs_final, lr=self.train_lr, seed=self.random_state)
        self.result_ = search(net, self.library, data, cfg, env, self.max_episodes, self.n_models, self.random_state,
                              self.beta, self.lr)
        self.pattern_ids_ = self.result_.actions
        self.satisfied_ = self.result_.satisfied
        return self
