"""University competitiveness and subject complexity from grant funding
networks, plus panel models of grant income."""

__version__ = "0.1.0"
