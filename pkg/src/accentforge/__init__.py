"""Accent-transfer distillation pipeline with an oracle evaluation harness.

A transfer-capable attention teacher synthesizes training data in target
accents; robust per-accent students (prosody predictor + waveform
synthesizer) are trained on that synthetic data; every claim about the
result is checked objectively against the corpus generator's known
parameters.
"""

__version__ = "0.1.0"
