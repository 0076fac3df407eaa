"""acre: a desk-scale audio-caption retrieval engine.

Audio and text are embedded by frozen toy encoders (or external embedding
dumps), projected into a shared space by two trainable linear heads, aligned
with a symmetric contrastive loss, and ranked by cosine similarity.
"""

from . import cli, dsp, encoder, ingest, retrieval, space
from .seeding import derive_seed

__all__ = ["cli", "dsp", "encoder", "ingest", "retrieval", "space", "derive_seed"]

__version__ = "0.1.0"
