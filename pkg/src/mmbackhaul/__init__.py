"""Planning and evaluation toolkit for duty-cycled, frame-aggregated mesh backhaul."""

__version__ = "0.1.0"
