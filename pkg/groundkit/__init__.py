"""groundkit: grounding data preparation and evaluation for detection-as-sequence VLMs."""

__version__ = "0.1.0"
