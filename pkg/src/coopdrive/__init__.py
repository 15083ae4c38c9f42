"""Cooperative ramp-exit driving on a lattice road: multi-modal state
encoding, a policy-token transformer with physical positional encoding, and a
multi-agent DQN trainer with full evaluation metrics."""

__version__ = "0.1.0"
