"""Central finite-difference validation of the analytic gradients.

Builds a random scene-sized batch, takes the joint TD loss against a frozen
target copy of the parameters, and compares backward() against central
differences with step 1e-6 on coordinates sampled from every parameter group.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import network
from . import tensor as T
from .agent import Transition, madqn_loss
from .encoder import TokenSequence
from .network import NetConfig

FD_STEP = 1e-6
REL_TOL = 1e-4
# denominator floor: coordinates with gradients this small are compared at an
# absolute tolerance of REL_TOL * floor instead of a blown-up ratio
DENOM_FLOOR = 1e-2


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: str
    n_coordinates: int
    passed: bool

    def to_text(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"gradcheck {status}: max relative error "
                f"{self.max_rel_error:.3e} over {self.n_coordinates} "
                f"coordinates (worst: {self.worst_coordinate}, "
                f"tolerance {REL_TOL:g})")


def _random_batch(config: NetConfig, rng: np.random.Generator, batch: int):
    out = []
    for _ in range(batch):
        def seq():
            tokens = rng.normal(0.0, 1.0, (config.n_vehicles, config.token_len))
            positions = rng.choice(config.n_pos, size=config.n_vehicles,
                                   replace=False)
            return TokenSequence(tokens=tokens,
                                 positions=positions.astype(np.intp),
                                 cav_indices=tuple(range(config.n_cav)))
        actions = rng.integers(0, config.n_actions, size=config.n_cav)
        out.append(Transition(s=seq(), a=actions,
                              r=float(rng.normal(0.0, 1.0)),
                              s2=seq(), done=bool(rng.random() < 0.2)))
    return out


def run_gradcheck(config: NetConfig | None = None, samples: int = 200,
                  seed: int = 0, batch: int = 2) -> GradCheckReport:
    if config is None:
        config = NetConfig()
    rng = np.random.default_rng(seed)
    params = network.init_parameters(config, rng)
    frozen = params.copy()
    transitions = _random_batch(config, rng, batch)

    def loss_value() -> float:
        with T.no_grad():
            loss = madqn_loss(transitions, params, config, gamma=1.0,
                              target_params=frozen, training=False)
        return float(loss.data[0, 0])

    params.zero_grad()
    loss = madqn_loss(transitions, params, config, gamma=1.0,
                      target_params=frozen, training=False)
    T.backward(loss)

    named = params.named()
    groups = list(named)
    worst = 0.0
    worst_coord = ""
    checked = 0
    gi = 0
    while checked < samples:
        name = groups[gi % len(groups)]
        gi += 1
        tensor = named[name]
        flat_idx = int(rng.integers(tensor.data.size))
        idx = np.unravel_index(flat_idx, tensor.data.shape)
        analytic = float(tensor.grad[idx])
        original = float(tensor.data[idx])
        tensor.data[idx] = original + FD_STEP
        up = loss_value()
        tensor.data[idx] = original - FD_STEP
        down = loss_value()
        tensor.data[idx] = original
        numeric = (up - down) / (2.0 * FD_STEP)
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric),
                                            DENOM_FLOOR)
        if rel > worst:
            worst = rel
            worst_coord = f"{name}{list(idx)}"
        checked += 1
    return GradCheckReport(max_rel_error=worst, worst_coordinate=worst_coord,
                           n_coordinates=checked, passed=worst < REL_TOL)
