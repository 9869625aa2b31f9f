"""Bridge real corpora to the continual event-detection engine.

Runs a frozen pretrained masked-LM encoder over span-annotated sentences,
extracts boundary-token representations and LM-head logits restricted to a
candidate vocabulary, and writes the engine's two-file dataset format.
"""

__version__ = "0.1.0"
