"""Meta-Stackelberg defenses for federated learning: simulator, learners and exact oracles."""

__version__ = "0.1.0"
