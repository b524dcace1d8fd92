"""From-scratch asymptotic content-aware pyramid attention network (A3-FPN)."""
__version__ = "0.1.0"
