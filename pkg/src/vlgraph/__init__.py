"""Hierarchical graph reasoning over video frames and subtitles.

Segment-level cross/intra-modal gated message passing, adaptive query
extraction with self-halting, temporal reasoning, and two coherence
regularizers (entropic optimal transport and contrastive MI).
"""

__version__ = "0.1.0"
