"""Boundary-control laboratory for connection Laplacians on an interval.

Forward wave simulation, Dirichlet-to-Neumann synthesis and reconstruction of
a Hermitian connection and potential (up to gauge) from boundary data.
"""

__version__ = "0.1.0"
