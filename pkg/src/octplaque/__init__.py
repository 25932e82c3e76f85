"""Plaque classification on intravascular OCT B-scans."""

__version__ = "0.1.0"
