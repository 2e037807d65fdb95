"""Cross-domain cold-start rating prediction.

Users are modeled as simplex weights over a domain-shared set of full-
covariance Gaussian components fitted on item embeddings; the two domains'
components are aligned by entropic optimal transport, which carries user
weights from the source domain into the target domain for rating
prediction without any shared interactions.
"""

__version__ = "0.1.0"
