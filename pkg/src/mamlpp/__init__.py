"""MAML and MAML++ few-shot meta-learning on a numpy autodiff core."""

__version__ = "0.1.0"
