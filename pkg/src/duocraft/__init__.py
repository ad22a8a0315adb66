"""Two-player collaborative crafting gridworld with belief-question protocol and belief inference."""

__version__ = "0.1.0"
