"""Knowledge-graph completion with text-encoded entities, k-hop neighborhood
GNN encoding, contrastive tail scoring, and a variational edge-reconstruction
auxiliary task."""

__version__ = "0.1.0"
