"""Reachability CBF synthesis with symmetry and equivariance based inference."""
