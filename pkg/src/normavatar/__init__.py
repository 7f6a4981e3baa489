"""Normalized 3D head avatars from single images, trained on synthetic faces."""

__version__ = "0.1.0"
