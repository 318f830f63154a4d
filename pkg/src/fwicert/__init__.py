"""Desk-scale toolkit for certifying robustness and generalization of FWI networks."""

__version__ = "0.1.0"
