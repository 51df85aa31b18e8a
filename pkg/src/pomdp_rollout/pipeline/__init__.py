from .batch import StateBatch
from .env import HiddenState, damage_densities, env_step, is_terminal, sample_hidden
from .greedy import GreedyPolicy, greedy_actions, greedy_policy
from .instance import format_instance, load_instance, parse_instance
from .model import REPAIR, InstanceError, PipelineModel, Topology, default_chain, default_costs

__all__ = [
    "REPAIR", "GreedyPolicy", "HiddenState", "InstanceError", "PipelineModel", "StateBatch",
    "Topology", "damage_densities", "default_chain", "default_costs", "env_step",
    "format_instance", "greedy_actions", "greedy_policy", "is_terminal", "load_instance",
    "parse_instance", "sample_hidden",
]
