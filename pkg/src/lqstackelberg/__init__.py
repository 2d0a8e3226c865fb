"""Regime-switching LQ leader-follower games: Riccati solver, equilibrium synthesis and Monte-Carlo checks."""
