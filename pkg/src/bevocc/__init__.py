"""Desk-scale occupancy prediction with bidirectional instance/BEV attention."""

__version__ = "0.1.0"
