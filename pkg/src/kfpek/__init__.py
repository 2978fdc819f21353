"""Eyring-Kramers asymptotics for degenerate kinetic Fokker-Planck operators."""

__version__ = "0.1.0"
