"""Raster state encoding: per-vehicle multi-channel road matrices and the
flattened token sequence consumed by the policy network.

The road is a lattice of 1 m cells, one row per lane plus one extra row that
carries ramp-intention marks. A vehicle's state matrix is the sum of a scaled
one-hot position channel, a 2-D Gaussian speed potential field, and the
intention row; the full per-vehicle state adds a down-weighted sum of every
other vehicle's matrices.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, EncodingError


@dataclass(frozen=True)
class RoadGrid:
    """Lattice geometry of the three-lane road with an exit ramp."""

    n_lanes: int = 3
    l_main: int = 250          # cells of 1 m
    x_int: int = 200           # ramp throat cell
    int_range: int = 5         # intention window length upstream of x_int
    ramp_lane: int = 2         # rightmost lane

    def __post_init__(self):
        if not 0 < self.x_int <= self.l_main:
            raise ConfigError(f"x_int={self.x_int} outside (0, {self.l_main}]")
        if not 0 < self.int_range < self.x_int:
            raise ConfigError(f"int_range={self.int_range} invalid for x_int={self.x_int}")
        if not 0 <= self.ramp_lane < self.n_lanes:
            raise ConfigError(f"ramp_lane={self.ramp_lane} outside lane range")

    @property
    def n_rows(self) -> int:
        return self.n_lanes + 1

    @property
    def token_len(self) -> int:
        return self.n_rows * self.l_main

    @property
    def n_pos(self) -> int:
        """Number of discrete physical positions (lane-major cell index)."""
        return self.n_lanes * self.l_main

    def position_index(self, lane: int, x: float) -> int:
        return lane * self.l_main + int(np.floor(x))


@dataclass(frozen=True)
class EncoderWeights:
    """Scaling factors of the state channels."""

    i_ego: float = 30.0
    i_potential: float = 1.0
    i_intention: float = 10.0
    sigma_x: float = 5.0       # longitudinal decay (along the road)
    sigma_y: float = 0.7       # lateral decay (across lanes)
    w_others: float = 0.5
    ego_only_tokens: bool = False

    def __post_init__(self):
        if self.sigma_x <= 0 or self.sigma_y <= 0:
            raise ConfigError("sigma_x and sigma_y must be positive")
        for name in ("i_ego", "i_potential", "i_intention", "w_others"):
            if not np.isfinite(getattr(self, name)):
                raise ConfigError(f"{name} must be finite")


# sentinel physical position for vehicles no longer on the road
def sentinel_position(grid: RoadGrid) -> int:
    return grid.n_pos - 1


def _check_on_road(vehicle, grid: RoadGrid) -> tuple[int, int]:
    lane = int(vehicle.lane)
    if not 0 <= lane < grid.n_lanes:
        raise EncodingError(f"vehicle lane {lane} off-road")
    if not 0 <= vehicle.x < grid.l_main:
        raise EncodingError(f"vehicle x {vehicle.x} off-road")
    return lane, int(np.floor(vehicle.x))


def encode_position(vehicle, grid: RoadGrid, weights: EncoderWeights) -> np.ndarray:
    """Scaled one-hot matrix: i_ego at (lane, cell), zero elsewhere."""
    lane, cell = _check_on_road(vehicle, grid)
    m = np.zeros((grid.n_rows, grid.l_main))
    m[lane, cell] = weights.i_ego
    return m


def encode_speed_field(vehicle, grid: RoadGrid, weights: EncoderWeights) -> np.ndarray:
    """2-D Gaussian potential field centered on the vehicle, scaled by speed.

    Decay is sigma_x along the road (columns) and sigma_y across rows.
    """
    lane, cell = _check_on_road(vehicle, grid)
    if vehicle.v < 0:
        raise EncodingError(f"negative speed {vehicle.v}")
    cols = np.arange(grid.l_main, dtype=np.float64)
    rows = np.arange(grid.n_rows, dtype=np.float64)
    long_term = np.exp(-((cols - cell) ** 2) / (2.0 * weights.sigma_x**2))
    lat_term = np.exp(-((rows - lane) ** 2) / (2.0 * weights.sigma_y**2))
    return (weights.i_potential * vehicle.v) * np.outer(lat_term, long_term)


def encode_intention(vehicle, grid: RoadGrid, weights: EncoderWeights) -> np.ndarray:
    """Intention row: i_intention on cells strictly inside
    (x_int - int_range, x_int) of the extra row; all-zero without ramp intent."""
    m = np.zeros((grid.n_rows, grid.l_main))
    if getattr(vehicle, "intends_ramp", False):
        lo = grid.x_int - grid.int_range
        m[grid.n_lanes, lo + 1:grid.x_int] = weights.i_intention
    return m


def self_state(vehicle, grid: RoadGrid, weights: EncoderWeights) -> np.ndarray:
    """Position + speed-field + intention channels; zero for inactive vehicles."""
    if not getattr(vehicle, "is_active", True):
        return np.zeros((grid.n_rows, grid.l_main))
    return (encode_position(vehicle, grid, weights)
            + encode_speed_field(vehicle, grid, weights)
            + encode_intention(vehicle, grid, weights))


def compose_state(i: int, vehicles, grid: RoadGrid, weights: EncoderWeights,
                  self_states: list[np.ndarray] | None = None) -> np.ndarray:
    """Full state of vehicle i: own channels plus w_others * sum of the rest."""
    if not 0 <= i < len(vehicles):
        raise EncodingError(f"vehicle index {i} out of range")
    if self_states is None:
        self_states = [self_state(v, grid, weights) for v in vehicles]
    others = np.zeros((grid.n_rows, grid.l_main))
    for j in range(len(vehicles)):
        if j != i:
            others += self_states[j]
    return self_states[i] + weights.w_others * others


@dataclass
class TokenSequence:
    """Flattened per-vehicle state tokens plus physical position indices.

    Inactive vehicles contribute an all-zero token at the sentinel position so
    the sequence length stays fixed. `cav_indices` lists which rows belong to
    the controlled vehicles, in fixed agent order.
    """

    tokens: np.ndarray          # (N, token_len) float64
    positions: np.ndarray       # (N,) int
    cav_indices: tuple[int, ...]

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


def build_token_sequence(vehicles, grid: RoadGrid,
                         weights: EncoderWeights) -> TokenSequence:
    n = len(vehicles)
    tokens = np.zeros((n, grid.token_len))
    positions = np.full(n, sentinel_position(grid), dtype=np.intp)
    selfs = [self_state(v, grid, weights) for v in vehicles]
    for j, veh in enumerate(vehicles):
        if not getattr(veh, "is_active", True):
            continue
        if weights.ego_only_tokens:
            state = selfs[j]
        else:
            state = compose_state(j, vehicles, grid, weights, self_states=selfs)
        tokens[j] = state.reshape(-1)
        positions[j] = grid.position_index(veh.lane, veh.x)
    cavs = tuple(j for j, veh in enumerate(vehicles)
                 if getattr(veh, "is_cav", False))
    return TokenSequence(tokens=tokens, positions=positions, cav_indices=cavs)
