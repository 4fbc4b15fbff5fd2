"""Dependent partition-valued processes with CRP marginals."""

__version__ = "0.1.0"
