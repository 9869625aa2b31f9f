"""Continual event detection over frozen-encoder features.

Trains an expandable span classifier across a stream of tasks, aligning
its class distribution with pretrained LM-head vocabulary mass through
entropically regularized optimal transport, and fighting forgetting with
exemplar replay, knowledge distillation, and prototype rehearsal.
"""

__version__ = "0.1.0"
