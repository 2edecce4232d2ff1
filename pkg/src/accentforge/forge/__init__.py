"""Deterministic parametric corpus generation with known latent parameters."""
from .corpus import forge_corpus
from .profile import (AccentParams, ForgeProfile, Phone, SpeakerParams,
                      StyleParams, default_profile, default_core_composition,
                      default_news_composition, NEWS_HEAVY_SPEAKERS)
from .render import RenderError, RenderResult, expected_frames, render_utterance
from .texts import (make_sentence, make_stress_sentence, neutral_variant,
                    news_variant, sentence_batch, stress_batch)

__all__ = [
    "AccentParams", "ForgeProfile", "Phone", "SpeakerParams", "StyleParams",
    "NEWS_HEAVY_SPEAKERS", "RenderError", "RenderResult", "default_profile",
    "default_core_composition", "default_news_composition", "expected_frames",
    "forge_corpus", "make_sentence", "make_stress_sentence", "neutral_variant",
    "news_variant", "render_utterance", "sentence_batch", "stress_batch",
]
