"""Desk-scale RAN slicing testbed: traffic, gNB queue model, scores, offline RL, classifier."""

__version__ = "0.1.0"
