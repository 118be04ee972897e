"""Device-edge co-inference scheduling toolkit."""

__version__ = "0.1.0"
