"""Carbon-aware OPF and carbon emission flow toolkit."""

__version__ = "0.1.0"
