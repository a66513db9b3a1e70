"""Prototype-expert multimodal MIL for discrete-time survival."""

__version__ = "0.1.0"
