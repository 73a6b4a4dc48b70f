"""Epipolar visual odometry toolkit."""

__version__ = "0.1.0"
