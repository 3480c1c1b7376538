"""sgswarm: swarm skill training plus a TransH skill graph for dispatch."""

__version__ = "0.1.0"
