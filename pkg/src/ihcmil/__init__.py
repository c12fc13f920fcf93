"""Two-step attention-MIL responder identification on IHC whole-slide images."""

__version__ = "0.1.0"
