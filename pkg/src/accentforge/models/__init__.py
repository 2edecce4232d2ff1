"""Trainable models: transfer teacher, prosody student, waveform synthesizer."""
