"""Volume-preserving mean-curvature flat flow on grids, with ball-closeness certification."""

__version__ = "0.1.0"
