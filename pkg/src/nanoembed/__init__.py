"""Desk-scale two-stage contrastive embedding trainer.

Stage 1 distills a frozen teacher's in-batch similarity distribution into
a student encoder; stage 2 fine-tunes with hard-negative contrastive loss
after filtering probable false negatives. Large batches run through a
two-pass gradient cache, and checkpoints are scored on ranking-based
retrieval tasks.
"""

__version__ = "0.1.0"
