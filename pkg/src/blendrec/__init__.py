"""Clustering-based collaborative filtering with blended representation spaces.

The package trains two-tower user/item embedding networks on implicit
feedback under several triplet objectives, clusters items into an inverted
file index, mines cluster-local training triplets, fuses the resulting
representation spaces with a per-pair attention network, and serves top-N
recommendations through a coarse-to-fine candidate search.
"""

__version__ = "0.1.0"
