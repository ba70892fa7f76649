"""Speech-to-LLM alignment with a DTW cosine loss, on a toy frozen decoder."""

__version__ = "0.1.0"
