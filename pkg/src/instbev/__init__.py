"""Instance-aware BEV encoding: box-guided foreground refinement and instance/background contrast."""

__version__ = "0.1.0"
