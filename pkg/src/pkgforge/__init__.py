"""pkgforge: procedural knowledge graphs, pseudo labels, and feature adapters."""

__version__ = "0.1.0"
