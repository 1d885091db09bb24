"""mseb: desk-scale teacher-student speaker embedding extraction from mixtures."""

__version__ = "0.1.0"
