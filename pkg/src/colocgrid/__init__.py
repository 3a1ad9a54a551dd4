"""Desk-scale data-colocation grid: region store, load balancer, MapReduce
averaging engine, chunk-size cost model and a split-family table scheme."""

__version__ = "0.1.0"
