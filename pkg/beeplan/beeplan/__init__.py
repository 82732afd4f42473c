"""Planning, modeling, and wire tools for pipelined LLM inference over slow links."""

__version__ = "0.1"
