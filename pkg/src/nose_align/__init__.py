"""Tri-modal molecule/receptor/odor-description embedding alignment.

Orthogonally decoupled adapters trained with soft-weighted multi-positive
InfoNCE, plus the retrieval and geometry evaluation suite, runnable at desk
scale on synthetic or precomputed embeddings.
"""

__version__ = "0.1.0"
