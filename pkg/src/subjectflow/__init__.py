"""Multi-subject in-context generation with attention regularisation and windowed group policy optimisation."""

__version__ = "0.1.0"
