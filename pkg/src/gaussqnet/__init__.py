"""Stationary workloads of feedforward Gaussian fluid networks under light- and
heavy-traffic scaling, with samplers for the limiting reflected fBm laws."""

__version__ = "0.1.0"
