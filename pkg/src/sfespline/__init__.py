"""Supply function equilibria via spline approximations."""
