"""Simulated multi-agent RL rollout/training co-design."""

from .config import PipelineMode, RunConfig, from_dict, load_config
from .orchestrator import Orchestrator, RunResult, run

__all__ = ["Orchestrator", "PipelineMode", "RunConfig", "RunResult", "from_dict", "load_config", "run"]
