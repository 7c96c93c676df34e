"""Verification library for re-parameterized large-kernel 3D depthwise convolutions."""

__version__ = "0.1.0"
