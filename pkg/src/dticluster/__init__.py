"""Deep transformation-invariant clustering (DTI K-means and DTI GMM)."""

__version__ = "0.1.0"
