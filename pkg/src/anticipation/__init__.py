"""Action anticipation from short egocentric clips with higher-order recurrent cells."""

__version__ = "0.1.0"
