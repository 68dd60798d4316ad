"""Reference workloads: WordCount, k-means and Monte-Carlo pi."""

from fmr.jobs.datagen import gaussian_blobs, zipf_corpus
from fmr.jobs.kmeans import CentroidAccumulator, InputError, KMeansState, kmeans, wcss_audit
from fmr.jobs.pi import pi_counts, pi_estimate
from fmr.jobs.wordcount import load_lines, tokenize, wordcount

__all__ = [
    "CentroidAccumulator", "InputError", "KMeansState", "gaussian_blobs", "kmeans", "load_lines",
    "pi_counts", "pi_estimate", "tokenize", "wcss_audit", "wordcount", "zipf_corpus",
]
