"""Pi-calculus platoon-merging protocol runtime with hybrid vehicle dynamics."""

__version__ = "0.1.0"
