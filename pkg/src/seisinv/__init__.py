"""Layered-earth seismic dataset synthesis, trace-embedding inversion
networks, and edge-aware evaluation metrics.

Subpackages and modules are imported lazily by the CLI; import the one
you need directly, e.g. ``from seisinv import geomodel``.
"""

__version__ = "0.1.0"
