"""Desk-scale lab for logit-guided mixture-of-experts domain generalization."""

__version__ = "0.1.0"
