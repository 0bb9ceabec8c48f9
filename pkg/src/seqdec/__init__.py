"""Sequential decision framework: simulators, oracles, baselines, and a
from-scratch transformer policy with training and regret evaluation."""

__version__ = "0.1.0"
