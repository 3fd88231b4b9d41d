"""Toy TTS traceability framework: a differentiable harmonic speech generator
jointly trained with a paired discriminator so the discriminator can attribute
audio to that generator without any embedded watermark."""

__version__ = "0.1.0"
