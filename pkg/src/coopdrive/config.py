"""Key=value configuration files (INI sections) for scenarios and experiments.

A scenario file holds the road/roster definition plus encoder, reward and
background-driver parameters. An experiment file references a scenario file
and adds network, training, seed and output settings. Loading and dumping
round-trip losslessly.
"""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .agent import RewardWeights, TrainConfig
from .encoder import EncoderWeights, RoadGrid
from .errors import ConfigError
from .network import NetConfig
from .sim import IDMParams, ScenarioConfig


def _coerce(section: str, key: str, raw: str, typ):
    try:
        if typ is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if typ is int:
            return int(raw)
        if typ is float:
            return float(raw)
        if typ is str:
            return raw.strip()
        if typ == tuple[int, ...]:
            return tuple(int(s) for s in raw.split(",") if s.strip())
        if typ == tuple[float, ...]:
            return tuple(float(s) for s in raw.split(",") if s.strip())
    except ValueError as err:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from err
    raise ConfigError(f"[{section}] {key}: unsupported type {typ}")


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt_value(x) for x in v)
    return str(v)


def _read_section(parser: configparser.ConfigParser, section: str,
                  spec: dict[str, type], defaults: dict) -> dict:
    """Parse one section against a {key: type} spec; unknown keys are errors."""
    out = dict(defaults)
    if not parser.has_section(section):
        return out
    for key, raw in parser.items(section):
        if key not in spec:
            raise ConfigError(f"[{section}] unknown key '{key}'")
        out[key] = _coerce(section, key, raw, spec[key])
    return out


_GRID_SPEC = {"n_lanes": int, "l_main": int, "x_int": int, "int_range": int,
              "ramp_lane": int}
_SCENARIO_SPEC = {
    "initial_x": tuple[float, ...], "initial_lane": tuple[int, ...],
    "cav_slots": tuple[int, ...], "initial_speed": float, "accel": float,
    "v_max": float, "dt": float, "body_len": float, "lc_window": int,
    "freeze_last_speed": bool, "max_steps": int,
}
_HDV_SPEC = {"v0": float, "s0": float, "t_headway": float, "a_max": float,
             "b": float, "quantize_threshold": float, "lc_threshold": float,
             "b_safe": float, "margin": float}
_ENCODER_SPEC = {"i_ego": float, "i_potential": float, "i_intention": float,
                 "sigma_x": float, "sigma_y": float, "w_others": float,
                 "ego_only_tokens": bool}
_REWARD_SPEC = {"w1": float, "w2": float, "w3": float, "w4": float}
_NET_SPEC = {"d_model": int, "n_layers": int, "n_heads": int, "d_head": int,
             "dropout": float, "mlp_ratio": int, "use_ppe": bool,
             "learned_pos": bool}
_TRAIN_SPEC = {"episodes": int, "gamma": float, "eps_init": float,
               "eps_min": float, "eps_decay": float, "lr": float,
               "batch_size": int, "buffer_capacity": int, "target_sync": int,
               "grad_clip": float, "train_every": int, "checkpoint_every": int,
               "log_wall_time": bool}
_EXPERIMENT_SPEC = {"scenario": str, "out_dir": str, "run_id": str,
                    "seeds": tuple[int, ...]}


def _defaults_of(cls, skip=()) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        if f.default is not dataclasses.MISSING:
            out[f.name] = f.default
        elif f.default_factory is not dataclasses.MISSING:  # type: ignore[misc]
            out[f.name] = f.default_factory()  # type: ignore[misc]
    return out


def load_scenario(path) -> tuple[ScenarioConfig, EncoderWeights, RewardWeights]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"scenario file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err
    grid_kw = _read_section(parser, "scenario",
                            {**_GRID_SPEC, **_SCENARIO_SPEC},
                            {**_defaults_of(RoadGrid),
                             **_defaults_of(ScenarioConfig, skip=("grid", "hdv"))})
    grid = RoadGrid(**{k: grid_kw.pop(k) for k in _GRID_SPEC})
    hdv = IDMParams(**_read_section(parser, "hdv", _HDV_SPEC,
                                    _defaults_of(IDMParams)))
    scenario = ScenarioConfig(grid=grid, hdv=hdv, **grid_kw)
    enc = EncoderWeights(**_read_section(parser, "encoder", _ENCODER_SPEC,
                                         _defaults_of(EncoderWeights)))
    rew = RewardWeights(**_read_section(parser, "reward", _REWARD_SPEC,
                                        _defaults_of(RewardWeights)))
    return scenario, enc, rew


@dataclasses.dataclass
class ExperimentConfig:
    """Everything one experiment needs, loaded from an experiment file."""

    path: Path
    scenario_path: Path
    scenario: ScenarioConfig
    encoder: EncoderWeights
    reward: RewardWeights
    net: NetConfig
    train: TrainConfig
    out_dir: str = "runs"
    run_id: str = "run"
    seeds: tuple[int, ...] = (1, 2, 3, 4, 5, 6)


def _build_net_config(net_kw: dict, scenario: ScenarioConfig) -> NetConfig:
    grid = scenario.grid
    return NetConfig(n_pos=grid.n_pos, token_len=grid.token_len,
                     n_vehicles=scenario.n_vehicles,
                     n_cav=len(scenario.cav_slots), **net_kw)


def load_experiment(path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"experiment file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err
    exp = _read_section(parser, "experiment", _EXPERIMENT_SPEC,
                        {"scenario": "", "out_dir": "runs", "run_id": "run",
                         "seeds": (1, 2, 3, 4, 5, 6)})
    if not exp["scenario"]:
        raise ConfigError(f"{path}: [experiment] must name a scenario file")
    scenario_path = Path(exp["scenario"])
    if not scenario_path.is_absolute():
        scenario_path = path.parent / scenario_path
    scenario, enc, rew = load_scenario(scenario_path)
    net_kw = _read_section(parser, "net", _NET_SPEC,
                           _defaults_of(NetConfig,
                                        skip=("n_pos", "token_len",
                                              "n_vehicles", "n_cav",
                                              "n_actions")))
    net = _build_net_config(net_kw, scenario)
    train = TrainConfig(**_read_section(parser, "train", _TRAIN_SPEC,
                                        _defaults_of(TrainConfig)))
    return ExperimentConfig(path=path, scenario_path=scenario_path,
                            scenario=scenario, encoder=enc, reward=rew,
                            net=net, train=train, out_dir=exp["out_dir"],
                            run_id=exp["run_id"], seeds=exp["seeds"])


def dump_scenario(scenario: ScenarioConfig, enc: EncoderWeights,
                  rew: RewardWeights, path) -> None:
    parser = configparser.ConfigParser()
    parser["scenario"] = {}
    for k in _GRID_SPEC:
        parser["scenario"][k] = _fmt_value(getattr(scenario.grid, k))
    for k in _SCENARIO_SPEC:
        parser["scenario"][k] = _fmt_value(getattr(scenario, k))
    parser["hdv"] = {k: _fmt_value(getattr(scenario.hdv, k)) for k in _HDV_SPEC}
    parser["encoder"] = {k: _fmt_value(getattr(enc, k)) for k in _ENCODER_SPEC}
    parser["reward"] = {k: _fmt_value(getattr(rew, k)) for k in _REWARD_SPEC}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)


def dump_experiment(cfg: ExperimentConfig, path, scenario_ref: str | None = None) -> None:
    parser = configparser.ConfigParser()
    parser["experiment"] = {
        "scenario": scenario_ref or str(cfg.scenario_path),
        "out_dir": cfg.out_dir,
        "run_id": cfg.run_id,
        "seeds": _fmt_value(cfg.seeds),
    }
    parser["net"] = {k: _fmt_value(getattr(cfg.net, k)) for k in _NET_SPEC}
    parser["train"] = {k: _fmt_value(getattr(cfg.train, k)) for k in _TRAIN_SPEC}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        parser.write(fh)


def config_snapshot(cfg: ExperimentConfig) -> dict:
    """JSON-safe snapshot of the full configuration (stored in checkpoints)."""
    def plain(obj):
        if dataclasses.is_dataclass(obj):
            return {f.name: plain(getattr(obj, f.name))
                    for f in dataclasses.fields(obj)}
        if isinstance(obj, tuple):
            return list(obj)
        if isinstance(obj, Path):
            return str(obj)
        return obj

    return {
        "scenario": plain(cfg.scenario),
        "encoder": plain(cfg.encoder),
        "reward": plain(cfg.reward),
        "net": plain(cfg.net),
        "train": plain(cfg.train),
        "seeds": list(cfg.seeds),
        "run_id": cfg.run_id,
    }
