"""Shared constants for the AMFormer desk implementation."""

# Norms below this are treated as zero when computing cosine similarity.
COSINE_EPS = 1e-8

# Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] before any log.
PROB_EPS = 1e-6

BINARIZE_THRESHOLD = 0.5

MAX_SAMPLE_ATTEMPTS = 100

CHECKPOINT_NAMESPACES = ("backbone", "miner", "attn", "detail")
