"""White matter fiber clustering with a Siamese distance embedding and
deep embedded clustering."""

__version__ = "0.1.0"
