"""ordscr: simultaneous clustering and dimension reduction of ordinal data.

Fits a latent Gaussian mixture whose informative structure lives in a
Q-dimensional subspace, by maximizing a pairwise (composite) likelihood
with an EM-like algorithm; selects (G, Q) with the composite-likelihood
BIC; classifies via IPF-reconstructed joint posteriors.
"""

__version__ = "0.1.0"
