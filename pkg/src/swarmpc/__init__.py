"""Learned receding-horizon formation control for multirobot swarms."""

from .dynamics import ErrorModel, LeaderSignal, formation_error
from .learning import (FeatureBasis, LearnerConfig, PolicyLearner,
                       deploy_policy, load_policy)
from .objective import ObjectiveSpec, synthesize_gains, terminal_penalty
from .safety import ControlBoxBarrier, SafetySetup
from .topology import Topology, build_topology, shape_topology

__all__ = [
    "ControlBoxBarrier", "ErrorModel", "FeatureBasis", "LeaderSignal",
    "LearnerConfig", "ObjectiveSpec", "PolicyLearner", "SafetySetup",
    "Topology", "build_topology", "deploy_policy", "formation_error",
    "load_policy", "shape_topology", "synthesize_gains", "terminal_penalty",
]

__version__ = "0.1.0"
