"""Keyframe discovery by joint keyframing and inpainting."""

__version__ = "0.1.0"
