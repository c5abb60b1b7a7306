"""Karma dynamic population games: equilibrium computation and model-free learning."""
from karma_mfg.game import (
    AgentState,
    ContractError,
    GameConfig,
    MeanField,
    load_instance,
)

__all__ = ["AgentState", "ContractError", "GameConfig", "MeanField", "load_instance"]
__version__ = "0.1.0"
