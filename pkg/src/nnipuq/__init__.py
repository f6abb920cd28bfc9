"""Uncertainty quantification for small neural-network interatomic potentials.

Submodules are imported lazily so that ``nnipuq.cli`` can set BLAS thread
variables before numpy loads.
"""

__version__ = "0.1.0"
