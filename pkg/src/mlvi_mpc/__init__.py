"""MLVI-MPC."""
