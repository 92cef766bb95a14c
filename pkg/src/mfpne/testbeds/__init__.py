"""Experiment testbeds: utility oracles with exact or reference truth scoring."""

from .base import Instance
from . import aloha, power, synthetic

__all__ = ["Instance", "synthetic", "power", "aloha"]
