"""Multi-agent DQN on the lattice scenario: joint reward, epsilon-greedy
action selection, replay buffer, the averaged-max joint TD loss, the training
loop, and the rule-based / random baseline policies.

A single network predicts one Q row per controlled vehicle; transitions are
joint (one tuple per simulation step, shared reward). The loss squares the
difference between the across-agents mean of chosen Q-values and the shared
target r + gamma * mean_i max_a Q_i(s').
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import network, sim
from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .encoder import EncoderWeights, TokenSequence, build_token_sequence
from .errors import ContractError, ParameterError
from .network import NetConfig, ParameterSet, batched_forward, forward
from .sim import (ActionPair, Lat, Lon, ScenarioConfig, SceneState,
                  find_follower, find_leader)


@dataclass(frozen=True)
class RewardWeights:
    """Linear weights of the shared step reward (speed, ramp, collision, LC)."""

    w1: float = 20.0
    w2: float = 6.0
    w3: float = -0.05
    w4: float = -80.0


def compute_reward(outcome: sim.StepOutcome, weights: RewardWeights,
                   n: int, v_max: float) -> float:
    """(w1*sum(v_i/v_max) + w2*n_onramp + w3*n_collision + w4*n_lc) / n."""
    if n <= 0:
        raise ContractError("vehicle count must be positive")
    speed_sum = sum(v / v_max for v in outcome.speeds)
    return (weights.w1 * speed_sum
            + weights.w2 * outcome.n_onramp
            + weights.w3 * outcome.n_collision
            + weights.w4 * outcome.n_lc) / n


def select_actions(q: np.ndarray, eps: float,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """Independent epsilon-greedy pick per Q row; ties go to the lowest index."""
    if not 0.0 <= eps <= 1.0:
        raise ParameterError(f"epsilon {eps} outside [0, 1]")
    if eps > 0.0 and rng is None:
        raise ParameterError("epsilon-greedy selection needs an rng")
    out = []
    for row in np.atleast_2d(q):
        if eps > 0.0 and rng.random() < eps:
            out.append(int(rng.integers(row.shape[0])))
        else:
            out.append(int(np.argmax(row)))
    return np.array(out, dtype=np.intp)


# ---------------------------------------------------------------------------
# replay


@dataclass
class Transition:
    s: TokenSequence
    a: np.ndarray            # per-CAV action indices
    r: float
    s2: TokenSequence
    done: bool


class ReplayBuffer:
    """Fixed-capacity ring of joint transitions with uniform sampling."""

    def __init__(self, capacity: int = 4000):
        if capacity <= 0:
            raise ParameterError("replay capacity must be positive")
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def push(self, item: Transition) -> None:
        if len(self._items) < self.capacity:
            self._items.append(item)
        else:
            self._items[self._next] = item
        self._next = (self._next + 1) % self.capacity

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        if batch_size <= 0 or batch_size > len(self._items):
            raise ContractError(
                f"cannot sample {batch_size} of {len(self._items)} transitions")
        idx = rng.choice(len(self._items), size=batch_size, replace=False)
        return [self._items[i] for i in idx]

    def __len__(self) -> int:
        return len(self._items)


# ---------------------------------------------------------------------------
# joint TD loss


def joint_target(rewards: np.ndarray, dones: np.ndarray, next_q: np.ndarray,
                 gamma: float) -> np.ndarray:
    """r + gamma * mean_i max_a Q_i(s', a), zeroing the bootstrap at done."""
    avg_max = next_q.max(axis=2).mean(axis=1)
    return rewards + gamma * avg_max * (1.0 - dones)


def madqn_loss(batch: list[Transition], params: ParameterSet, config: NetConfig,
               gamma: float, target_params: ParameterSet | None = None,
               rng: np.random.Generator | None = None,
               training: bool = True) -> T.Tensor:
    """Mean squared error between the across-agents mean of chosen Q-values
    and the shared bootstrapped target (target network optional)."""
    if not batch:
        raise ContractError("madqn_loss needs a non-empty batch")
    tgt = target_params if target_params is not None else params
    with T.no_grad():
        q2 = batched_forward([t.s2 for t in batch], tgt, config,
                             training=False)
    next_q = q2.data.reshape(len(batch), config.n_cav, config.n_actions)
    rewards = np.array([t.r for t in batch])
    dones = np.array([1.0 if t.done else 0.0 for t in batch])
    y = joint_target(rewards, dones, next_q, gamma)

    q = batched_forward([t.s for t in batch], params, config, rng, training)
    offsets = np.arange(config.n_cav) * config.n_actions
    cols = np.stack([t.a + offsets for t in batch])
    chosen = T.gather_cols_rowwise(q, cols)
    avg = T.matmul(chosen, T.constant(np.full((config.n_cav, 1),
                                              1.0 / config.n_cav)))
    diff = T.add_const(avg, -y[:, None])
    return T.mean_all(T.square(diff))


# ---------------------------------------------------------------------------
# baseline policies


def _greedy_safe_lon(scene: SceneState, veh: sim.Vehicle, lane: int) -> tuple[Lon, bool]:
    """Fastest longitudinal action that keeps a constant-speed-projected net
    gap of at least the margin behind the leader in `lane`. Returns the action
    and whether the constraint could actually be met."""
    cfg = scene.config
    need = cfg.body_len + cfg.hdv.margin
    leader = find_leader(scene.vehicles, lane, veh.x, veh.vid)
    if leader is None:
        return Lon.AC, True
    leader_post = leader.x + leader.v * cfg.dt
    for lon in (Lon.AC, Lon.SK, Lon.DC):
        dv = {Lon.AC: cfg.accel, Lon.SK: 0.0, Lon.DC: -cfg.accel}[lon]
        v_new = min(max(veh.v + dv * cfg.dt, 0.0), cfg.v_max)
        if leader_post - (veh.x + v_new * cfg.dt) >= need:
            return lon, True
    return Lon.DC, False


def _merge_gap_ok(scene: SceneState, veh: sim.Vehicle, target: int) -> tuple[bool, Lon]:
    """Accept a lane change when constant-speed projections keep margins to
    both target-lane neighbors."""
    cfg = scene.config
    need = cfg.body_len + cfg.hdv.margin
    lon, leader_ok = _greedy_safe_lon(scene, veh, target)
    if not leader_ok:
        return False, lon
    dv = {Lon.AC: cfg.accel, Lon.SK: 0.0, Lon.DC: -cfg.accel}[lon]
    v_new = min(max(veh.v + dv * cfg.dt, 0.0), cfg.v_max)
    my_post = veh.x + v_new * cfg.dt
    follower = find_follower(scene.vehicles, target, veh.x, veh.vid)
    if follower is not None:
        if my_post - (follower.x + follower.v * cfg.dt) < need:
            return False, lon
    return True, lon


def rule_based_policy(scene: SceneState) -> list[ActionPair]:
    """Deterministic ramp plan: drift one lane toward the ramp lane whenever
    the gap-acceptance test passes before the throat, drive as fast as the
    projected leader gap allows."""
    actions = []
    ramp = scene.grid.ramp_lane
    for veh in scene.cavs():
        if not veh.is_active:
            actions.append(ActionPair(Lon.SK, Lat.KEEP))
            continue
        lat = Lat.KEEP
        lane_for_lon = veh.lane
        if veh.lane != ramp and not veh.missed_ramp and veh.x < scene.grid.x_int:
            target = veh.lane + (1 if veh.lane < ramp else -1)
            ok, lon_t = _merge_gap_ok(scene, veh, target)
            if ok:
                lat = Lat.RIGHT if target > veh.lane else Lat.LEFT
                actions.append(ActionPair(lon_t, lat))
                continue
        lon, _ = _greedy_safe_lon(scene, veh, lane_for_lon)
        actions.append(ActionPair(lon, lat))
    return actions


class RuleBasedPolicy:
    """Callable wrapper around rule_based_policy (ignores tokens)."""

    name = "rule"

    def reset(self, episode_seed: int) -> None:
        pass

    def actions(self, scene: SceneState, seq: TokenSequence) -> list[ActionPair]:
        return rule_based_policy(scene)


class RandomPolicy:
    """Uniform over the 9 joint actions, reseeded per episode."""

    name = "random"

    def __init__(self):
        self._rng = np.random.default_rng(0)

    def reset(self, episode_seed: int) -> None:
        self._rng = np.random.default_rng(episode_seed)

    def actions(self, scene: SceneState, seq: TokenSequence) -> list[ActionPair]:
        return [ActionPair.from_index(int(self._rng.integers(9)))
                for _ in scene.config.cav_slots]


class NetPolicy:
    """Greedy (or epsilon-greedy) policy over the network's Q-values."""

    name = "net"

    def __init__(self, params: ParameterSet, config: NetConfig,
                 epsilon: float = 0.0):
        self.params = params
        self.config = config
        self.epsilon = epsilon
        self._rng = np.random.default_rng(0)

    def reset(self, episode_seed: int) -> None:
        self._rng = np.random.default_rng(episode_seed)

    def actions(self, scene: SceneState, seq: TokenSequence) -> list[ActionPair]:
        q = forward(seq, self.params, self.config)
        idx = select_actions(q, self.epsilon, self._rng)
        return [ActionPair.from_index(int(i)) for i in idx]


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    episodes: int = 5000
    gamma: float = 1.0
    eps_init: float = 1.0
    eps_min: float = 0.01
    eps_decay: float = 0.996
    lr: float = 0.001
    batch_size: int = 16
    buffer_capacity: int = 4000
    target_sync: int = 0         # gradient steps between syncs; 0 = no target net
    grad_clip: float = 10.0
    train_every: int = 1         # gradient steps per environment step
    checkpoint_every: int = 250  # episodes; 0 = final checkpoint only
    log_wall_time: bool = False  # keep CSVs bit-reproducible by default

    def __post_init__(self):
        if not 0.0 <= self.eps_min <= self.eps_init <= 1.0:
            raise ParameterError("need 0 <= eps_min <= eps_init <= 1")
        if not 0.0 < self.eps_decay < 1.0:
            raise ParameterError("eps_decay must be in (0, 1)")


LOG_COLUMNS = ("episode", "ats", "n_collisions", "n_success", "mean_speed",
               "epsilon", "mean_loss", "wall_time")


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


@dataclass
class TrainResult:
    rows: list[dict]
    params: ParameterSet
    log_path: Path


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _restore_rng(state: dict) -> np.random.Generator:
    rng = np.random.default_rng(0)
    rng.bit_generator.state = state
    return rng


def train(scenario: ScenarioConfig, enc: EncoderWeights, rew: RewardWeights,
          net_cfg: NetConfig, tcfg: TrainConfig, seed: int, out_dir,
          resume: str | None = None, config_snapshot: dict | None = None) -> TrainResult:
    """One seeded training run. Writes train_log.csv plus checkpoints under
    out_dir and returns the per-episode rows."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ss = np.random.SeedSequence(seed)
    init_ss, explore_ss, dropout_ss, sample_ss, env_ss = ss.spawn(5)
    explore_rng = np.random.default_rng(explore_ss)
    dropout_rng = np.random.default_rng(dropout_ss)
    sample_rng = np.random.default_rng(sample_ss)
    env_rng = np.random.default_rng(env_ss)

    start_episode = 0
    eps = tcfg.eps_init
    if resume is not None:
        arrays, meta = load_checkpoint(resume)
        params = network.from_arrays(net_cfg, {
            k: v for k, v in arrays.items() if not k.startswith("adam.")})
        start_episode = int(meta["episode"])
        eps = float(meta["epsilon"])
        opt = T.Adam(params.parameters(), lr=tcfg.lr)
        names = list(params.named())
        if all(f"adam.m.{n}" in arrays for n in names):
            opt.state.m = [arrays[f"adam.m.{n}"].copy() for n in names]
            opt.state.v = [arrays[f"adam.v.{n}"].copy() for n in names]
            opt.state.t = int(meta.get("adam_t", 0))
        for key, restore in (("explore", explore_rng), ("dropout", dropout_rng),
                             ("sample", sample_rng), ("env", env_rng)):
            if f"rng_{key}" in meta:
                restore.bit_generator.state = meta[f"rng_{key}"]
    else:
        params = network.init_parameters(net_cfg, np.random.default_rng(init_ss))
        opt = T.Adam(params.parameters(), lr=tcfg.lr)

    target = params.copy() if tcfg.target_sync > 0 else None
    buffer = ReplayBuffer(tcfg.buffer_capacity)
    rows: list[dict] = []
    grad_steps = 0

    def write_checkpoint(path: Path, episode: int) -> None:
        arrays = {k: v.data for k, v in params.named().items()}
        for n, m, v in zip(params.named(), opt.state.m, opt.state.v):
            arrays[f"adam.m.{n}"] = m
            arrays[f"adam.v.{n}"] = v
        meta = {
            "episode": episode,
            "epsilon": eps,
            "seed": seed,
            "adam_t": opt.state.t,
            "config": config_snapshot or {},
            "rng_explore": _rng_state(explore_rng),
            "rng_dropout": _rng_state(dropout_rng),
            "rng_sample": _rng_state(sample_rng),
            "rng_env": _rng_state(env_rng),
        }
        save_checkpoint(path, arrays, meta)

    log_path = out_dir / "train_log.csv"
    mode = "a" if (resume is not None and log_path.exists()) else "w"
    with open(log_path, mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(LOG_COLUMNS)
        for episode in range(start_episode, tcfg.episodes):
            t0 = time.perf_counter()
            scene = sim.reset(scenario, seed=int(env_rng.integers(2**63)))
            seq = build_token_sequence(scene.vehicles, scenario.grid, enc)
            rewards: list[float] = []
            losses: list[float] = []
            collisions = 0
            successes = 0
            speed_sum = 0.0
            speed_count = 0
            while not scene.done:
                q = forward(seq, params, net_cfg)
                act_idx = select_actions(q, eps, explore_rng)
                cav_actions = [ActionPair.from_index(int(i)) for i in act_idx]
                active_before = [v.vid for v in scene.active()]
                scene, outcome = sim.step(scene, cav_actions)
                r = compute_reward(outcome, rew, scenario.n_vehicles,
                                   scenario.v_max)
                seq2 = build_token_sequence(scene.vehicles, scenario.grid, enc)
                buffer.push(Transition(seq, act_idx, r, seq2, outcome.done))
                rewards.append(r)
                collisions += outcome.n_collision
                successes += outcome.n_onramp
                for vid in active_before:
                    speed_sum += scene.vehicles[vid].v
                    speed_count += 1
                if len(buffer) >= tcfg.batch_size:
                    for _ in range(tcfg.train_every):
                        batch = buffer.sample(tcfg.batch_size, sample_rng)
                        loss = madqn_loss(batch, params, net_cfg, tcfg.gamma,
                                          target_params=target,
                                          rng=dropout_rng, training=True)
                        opt.zero_grad()
                        T.backward(loss)
                        T.clip_grad_norm(params.parameters(), tcfg.grad_clip)
                        opt.step()
                        losses.append(float(loss.data[0, 0]))
                        grad_steps += 1
                        if target is not None and grad_steps % tcfg.target_sync == 0:
                            target = params.copy()
                seq = seq2
            eps = max(tcfg.eps_min, eps * tcfg.eps_decay)
            row = {
                "episode": episode,
                "ats": sum(rewards) / len(rewards),
                "n_collisions": collisions,
                "n_success": successes,
                "mean_speed": speed_sum / max(speed_count, 1),
                "epsilon": eps,
                "mean_loss": sum(losses) / len(losses) if losses else math.nan,
                "wall_time": time.perf_counter() - t0 if tcfg.log_wall_time else 0.0,
            }
            rows.append(row)
            writer.writerow([_fmt(row[c]) for c in LOG_COLUMNS])
            if tcfg.checkpoint_every > 0 and (episode + 1) % tcfg.checkpoint_every == 0:
                write_checkpoint(out_dir / f"checkpoint_{episode + 1:06d}.ckpt",
                                 episode + 1)
        write_checkpoint(out_dir / "checkpoint_final.ckpt", tcfg.episodes)
    return TrainResult(rows=rows, params=params, log_path=log_path)
