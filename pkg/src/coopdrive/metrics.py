"""Evaluation: seeded test episodes, the four summary metrics, and episode
trace export with an exact reward-recomputation path.

The average traffic score of an episode is the mean per-step reward; the
report aggregates it over episodes together with ramp success percentage,
mean collisions per episode, and mean active-vehicle speed.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import sim
from .agent import RewardWeights, compute_reward
from .encoder import EncoderWeights, build_token_sequence
from .errors import ContractError
from .sim import ScenarioConfig, Status


def ats(rewards: list[float]) -> float:
    """Mean per-step reward of one episode."""
    if not rewards:
        raise ContractError("ats of an empty episode is undefined")
    return sum(rewards) / len(rewards)


TRACE_COLUMNS = ("episode", "t", "vehicle_id", "lane", "x", "v", "status",
                 "action", "n_onramp", "n_collision", "n_lc", "reward")


@dataclass
class EpisodeResult:
    rewards: list[float]
    n_collisions: int
    n_success: int
    velo: float
    steps: int

    @property
    def ats(self) -> float:
        return ats(self.rewards)


def play_episode(scenario: ScenarioConfig, enc: EncoderWeights,
                 rew: RewardWeights, policy, seed: int,
                 trace_rows: list | None = None,
                 episode_index: int = 0) -> EpisodeResult:
    """Run one full episode under `policy`; optionally append trace rows."""
    policy.reset(seed)
    scene = sim.reset(scenario, seed=seed)
    rewards: list[float] = []
    collisions = 0
    successes = 0
    speed_sum = 0.0
    speed_count = 0
    while not scene.done:
        seq = build_token_sequence(scene.vehicles, scenario.grid, enc)
        cav_actions = policy.actions(scene, seq)
        active_before = [v.vid for v in scene.active()]
        t_step = scene.t
        scene, outcome = sim.step(scene, cav_actions)
        r = compute_reward(outcome, rew, scenario.n_vehicles, scenario.v_max)
        rewards.append(r)
        collisions += outcome.n_collision
        successes += outcome.n_onramp
        for vid in active_before:
            speed_sum += scene.vehicles[vid].v
            speed_count += 1
        if trace_rows is not None:
            for veh in scene.vehicles:
                action = outcome.actions[veh.vid]
                trace_rows.append({
                    "episode": episode_index,
                    "t": t_step,
                    "vehicle_id": veh.vid,
                    "lane": veh.lane,
                    "x": veh.x,
                    "v": veh.v,
                    "status": veh.status.value,
                    "action": str(action) if action is not None else "",
                    "n_onramp": outcome.n_onramp,
                    "n_collision": outcome.n_collision,
                    "n_lc": outcome.n_lc,
                    "reward": r,
                })
    return EpisodeResult(rewards=rewards, n_collisions=collisions,
                         n_success=successes,
                         velo=speed_sum / max(speed_count, 1),
                         steps=len(rewards))


@dataclass
class MetricsReport:
    """Aggregate of the four evaluation metrics over a seeded episode batch."""

    ats: float
    succ_pct: float
    coll: float
    velo: float
    n_episodes: int
    seeds: tuple[int, ...]
    policy: str = ""
    per_episode: list[EpisodeResult] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "policy": self.policy,
            "n_episodes": self.n_episodes,
            "seed_first": self.seeds[0] if self.seeds else None,
            "seed_last": self.seeds[-1] if self.seeds else None,
            "ats": self.ats,
            "succ_pct": self.succ_pct,
            "coll": self.coll,
            "velo": self.velo,
        }

    def to_text(self) -> str:
        lines = [
            f"policy     : {self.policy}",
            f"episodes   : {self.n_episodes}",
            f"ATS        : {self.ats:.4f}",
            f"Succ.%     : {self.succ_pct:.2f}",
            f"Coll.      : {self.coll:.4f}",
            f"Velo. (m/s): {self.velo:.4f}",
        ]
        return "\n".join(lines)


def evaluate(policy, scenario: ScenarioConfig, enc: EncoderWeights,
             rew: RewardWeights, n_episodes: int,
             seeds: list[int] | None = None,
             trace_path=None, episodes_csv=None) -> MetricsReport:
    """Run seeded episodes and aggregate ATS / Succ% / Coll / Velo."""
    if n_episodes <= 0:
        raise ContractError("n_episodes must be positive")
    if seeds is None:
        seeds = list(range(n_episodes))
    if len(seeds) != n_episodes:
        raise ContractError(f"{n_episodes} episodes but {len(seeds)} seeds")
    n_cav = len(scenario.cav_slots)
    trace_rows: list | None = [] if trace_path is not None else None
    results = []
    for i, seed in enumerate(seeds):
        results.append(play_episode(scenario, enc, rew, policy, seed,
                                    trace_rows=trace_rows, episode_index=i))
    report = MetricsReport(
        ats=sum(r.ats for r in results) / n_episodes,
        succ_pct=100.0 * sum(r.n_success for r in results) / (n_episodes * n_cav),
        coll=sum(r.n_collisions for r in results) / n_episodes,
        velo=sum(r.velo for r in results) / n_episodes,
        n_episodes=n_episodes,
        seeds=tuple(seeds),
        policy=getattr(policy, "name", type(policy).__name__),
        per_episode=results,
    )
    if trace_path is not None:
        write_trace(trace_path, trace_rows)
    if episodes_csv is not None:
        write_episode_csv(episodes_csv, results)
    return report


def _fmt(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_trace(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in TRACE_COLUMNS])


def write_episode_csv(path, results: list[EpisodeResult]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("episode", "ats", "n_collisions", "n_success",
                         "velo", "steps"))
        for i, r in enumerate(results):
            writer.writerow([i, _fmt(r.ats), r.n_collisions, r.n_success,
                             _fmt(r.velo), r.steps])


def write_report(out_dir, report: MetricsReport) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "report.txt").write_text(report.to_text() + "\n")
    (out_dir / "report.json").write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def ats_from_trace(path, weights: RewardWeights, n: int, v_max: float,
                   freeze_last_speed: bool = False) -> dict[int, float]:
    """Recompute each episode's ATS from an exported trace.

    Speeds are reconstructed per the reward convention (inactive vehicles
    count v_max unless the frozen-speed mode was used); event counts come from
    the step-level columns. Serves as the independent consistency check that
    logged rewards match the trace.
    """
    per_step: dict[tuple[int, int], dict] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (int(row["episode"]), int(row["t"]))
            entry = per_step.setdefault(key, {
                "speeds": [],
                "n_onramp": int(row["n_onramp"]),
                "n_collision": int(row["n_collision"]),
                "n_lc": int(row["n_lc"]),
                "logged": float(row["reward"]),
            })
            if row["status"] == Status.ACTIVE.value or freeze_last_speed:
                entry["speeds"].append(float(row["v"]))
            else:
                entry["speeds"].append(v_max)
    episodes: dict[int, list[float]] = {}
    for (ep, t) in sorted(per_step):
        entry = per_step[(ep, t)]
        outcome = sim.StepOutcome(
            n_onramp=entry["n_onramp"],
            n_collision=entry["n_collision"],
            n_lc=entry["n_lc"],
            speeds=entry["speeds"],
            done=False,
        )
        episodes.setdefault(ep, []).append(
            compute_reward(outcome, weights, n, v_max))
    return {ep: ats(rewards) for ep, rewards in episodes.items()}
