"""Two-stage text-to-image stack on a procedural captioned-shapes dataset."""

__version__ = "0.1.0"
