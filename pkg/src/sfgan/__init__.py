"""Conditional adversarial scene-flow estimation from stereo image quads."""

__version__ = "0.1.0"
