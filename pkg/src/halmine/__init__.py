"""Mining, benchmarking and mitigation-dataset tooling for false-positive
object hallucinations in vision-language models."""

__version__ = "0.1.0"
