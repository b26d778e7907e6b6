"""Confidence tuning for small/large model cascades.

Train a small model with the Gatekeeper hybrid loss, gate its predictions by
confidence, and measure how well the resulting cascade defers.
"""

__version__ = "0.1.0"
