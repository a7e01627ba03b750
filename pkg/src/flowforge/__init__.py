"""FlowForge: explore-to-scale workflow engine with data-driven steering."""

__version__ = "0.1.0"
