"""Monte Carlo maximum likelihood for discretely observed scalar diffusions."""

__version__ = "0.1.0"
