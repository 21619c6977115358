"""Reference-based region labeling: retrieval, optimal-transport matching,
rewards, and memory-attention mask fusion at desk scale."""

__version__ = "0.1.0"
