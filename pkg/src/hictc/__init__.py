"""Subword-level CTC recognition with an auxiliary phone-level CTC loss.

The package trains stacked bidirectional LSTM encoders with a wordpiece CTC
head on the top layer and, optionally, a phone CTC head attached to a chosen
intermediate layer. Training regimes cover the plain subword baseline, joint
multitask training, phone-only pretraining, and pretraining followed by
multitask fine-tuning. Everything runs on seeded synthetic data at desk scale.
"""

__version__ = "0.1.0"
