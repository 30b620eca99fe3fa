"""Split inference of a small transformer over a fading channel, with a PPO
agent that picks the splitting point and a learned reward surrogate."""

__version__ = "0.1.0"
