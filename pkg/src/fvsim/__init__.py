"""Fleming-Viot particle systems with killing: simulation, genealogy and limit checks."""

from ._version import __version__

__all__ = ["__version__"]
