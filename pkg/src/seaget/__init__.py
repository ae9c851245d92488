"""Next point-of-interest recommendation: flow-graph GCN embeddings, contextual
fusion, a causal transformer encoder and an opening-hours filter."""

__version__ = "0.1.0"
