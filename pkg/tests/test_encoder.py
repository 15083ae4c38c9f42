"""State encoding: position one-hot, speed potential field, intention row,
weighted composition, token sequences."""

import math
from dataclasses import dataclass

import numpy as np
import pytest

from coopdrive.encoder import (EncoderWeights, RoadGrid, build_token_sequence,
                               compose_state, encode_intention,
                               encode_position, encode_speed_field, self_state,
                               sentinel_position)
from coopdrive.errors import ConfigError, EncodingError


@dataclass
class Veh:
    lane: int
    x: float
    v: float
    intends_ramp: bool = False
    is_active: bool = True
    is_cav: bool = False


GRID = RoadGrid()
W = EncoderWeights()


def test_grid_defaults():
    assert GRID.n_rows == 4
    assert GRID.token_len == 1000
    assert GRID.n_pos == 750


def test_grid_validation():
    with pytest.raises(ConfigError):
        RoadGrid(x_int=300)
    with pytest.raises(ConfigError):
        RoadGrid(int_range=250)


def test_position_one_hot():
    m = encode_position(Veh(lane=1, x=20.0, v=5.0), GRID, W)
    assert m[1, 20] == 30.0
    assert m.sum() == 30.0          # exactly I_ego
    assert np.count_nonzero(m) == 1  # L0 norm one


def test_position_floors_continuous_x():
    m = encode_position(Veh(lane=0, x=12.9, v=5.0), GRID, W)
    assert m[0, 12] == 30.0


def test_position_deterministic():
    v = Veh(lane=2, x=7.0, v=3.0)
    assert np.array_equal(encode_position(v, GRID, W),
                          encode_position(v, GRID, W))


def test_position_off_road():
    with pytest.raises(EncodingError):
        encode_position(Veh(lane=3, x=10.0, v=0.0), GRID, W)
    with pytest.raises(EncodingError):
        encode_position(Veh(lane=0, x=250.0, v=0.0), GRID, W)


def test_speed_field_peak_at_own_cell():
    m = encode_speed_field(Veh(lane=1, x=100.0, v=10.0), GRID, W)
    assert m[1, 100] == 10.0        # exponent is exactly zero
    assert m.max() == m[1, 100]


def test_speed_field_sigma_offset():
    m = encode_speed_field(Veh(lane=1, x=100.0, v=10.0), GRID, W)
    assert abs(m[1, 105] - 10.0 * math.exp(-0.5)) < 1e-12
    # lateral decay one lane over
    assert abs(m[0, 100] - 10.0 * math.exp(-1.0 / (2 * 0.7**2))) < 1e-12


def test_speed_field_zero_speed():
    m = encode_speed_field(Veh(lane=0, x=5.0, v=0.0), GRID, W)
    assert not m.any()


def test_speed_field_negative_speed():
    with pytest.raises(EncodingError):
        encode_speed_field(Veh(lane=0, x=5.0, v=-1.0), GRID, W)


def test_intention_without_ramp_intent():
    m = encode_intention(Veh(lane=0, x=5.0, v=1.0), GRID, W)
    assert not m.any()


def test_intention_window_cells():
    m = encode_intention(Veh(lane=1, x=5.0, v=1.0, intends_ramp=True), GRID, W)
    # strict bounds: cells 196..199 of the extra row
    assert np.all(m[3, 196:200] == W.i_intention)
    assert m[3, 195] == 0.0 and m[3, 200] == 0.0
    assert m[:3].sum() == 0.0
    assert m.sum() == W.i_intention * (GRID.int_range - 1)


def test_compose_single_vehicle_equals_self():
    v = Veh(lane=1, x=40.0, v=8.0)
    assert np.array_equal(compose_state(0, [v], GRID, W),
                          self_state(v, GRID, W))


def test_compose_zero_weight_ignores_others():
    w0 = EncoderWeights(w_others=0.0)
    a, b = Veh(lane=0, x=10.0, v=5.0), Veh(lane=2, x=90.0, v=5.0)
    assert np.array_equal(compose_state(0, [a, b], GRID, w0),
                          self_state(a, GRID, w0))


def test_compose_two_vehicle_entry_scalar_oracle():
    a = Veh(lane=0, x=10.0, v=5.0)
    b = Veh(lane=2, x=90.0, v=7.0)
    s = compose_state(0, [a, b], GRID, W)
    # expected value at b's cell, evaluated from the raw formulas
    tail_a = (W.i_potential * a.v
              * math.exp(-((90 - 10) ** 2) / (2 * W.sigma_x**2))
              * math.exp(-((2 - 0) ** 2) / (2 * W.sigma_y**2)))
    own_b = W.i_ego + W.i_potential * b.v  # one-hot plus field peak
    assert abs(s[2, 90] - (tail_a + W.w_others * own_b)) < 1e-12


def test_compose_linearity():
    vehicles = [Veh(lane=0, x=10.0, v=5.0), Veh(lane=1, x=50.0, v=10.0),
                Veh(lane=2, x=90.0, v=15.0, intends_ramp=True)]
    selfs = [self_state(v, GRID, W) for v in vehicles]
    for i in range(3):
        others = sum(selfs[j] for j in range(3) if j != i)
        recovered = compose_state(i, vehicles, GRID, W) - W.w_others * others
        assert np.max(np.abs(recovered - selfs[i])) < 1e-12


def test_token_sequence_shapes_and_positions():
    vehicles = [Veh(lane=1, x=20.0, v=10.0), Veh(lane=0, x=30.0, v=10.0),
                Veh(lane=0, x=50.0, v=10.0), Veh(lane=2, x=50.0, v=10.0),
                Veh(lane=2, x=30.0, v=10.0, intends_ramp=True, is_cav=True),
                Veh(lane=1, x=0.0, v=10.0, intends_ramp=True, is_cav=True)]
    seq = build_token_sequence(vehicles, GRID, W)
    assert seq.tokens.shape == (6, 1000)
    assert seq.cav_indices == (4, 5)
    assert seq.positions[3] == 2 * 250 + 50
    # spec'd example: lane 2, x 30 -> 530
    assert GRID.position_index(2, 30.0) == 530


def test_token_sequence_inactive_vehicle_zeroed():
    vehicles = [Veh(lane=1, x=20.0, v=10.0),
                Veh(lane=0, x=30.0, v=10.0, is_active=False)]
    seq = build_token_sequence(vehicles, GRID, W)
    assert not seq.tokens[1].any()
    assert seq.positions[1] == sentinel_position(GRID)
    # the inactive vehicle contributes nothing to the active one's token
    solo = build_token_sequence([vehicles[0]], GRID, W)
    assert np.array_equal(seq.tokens[0], solo.tokens[0])


def test_token_sequence_permutation_consistency():
    vehicles = [Veh(lane=0, x=10.0, v=5.0), Veh(lane=1, x=50.0, v=10.0),
                Veh(lane=2, x=90.0, v=15.0)]
    seq = build_token_sequence(vehicles, GRID, W)
    perm = [2, 0, 1]
    seq_p = build_token_sequence([vehicles[j] for j in perm], GRID, W)
    assert np.array_equal(seq_p.tokens, seq.tokens[perm])
    assert np.array_equal(seq_p.positions, seq.positions[perm])


def test_ego_only_tokens_mode():
    w_ego = EncoderWeights(ego_only_tokens=True)
    vehicles = [Veh(lane=0, x=10.0, v=5.0), Veh(lane=1, x=50.0, v=10.0)]
    seq = build_token_sequence(vehicles, GRID, w_ego)
    expected = self_state(vehicles[0], GRID, w_ego).reshape(-1)
    assert np.array_equal(seq.tokens[0], expected)


def test_encoders_deterministic_pure():
    vehicles = [Veh(lane=0, x=10.0, v=5.0), Veh(lane=1, x=50.0, v=10.0)]
    a = build_token_sequence(vehicles, GRID, W)
    b = build_token_sequence(vehicles, GRID, W)
    assert np.array_equal(a.tokens, b.tokens)
    assert np.array_equal(a.positions, b.positions)
