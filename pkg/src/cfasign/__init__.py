"""Factor-loading sign behaviour in confirmatory factor analysis."""

__version__ = "0.1.0"
