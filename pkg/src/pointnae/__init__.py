"""Point-annotation refinement with a noised autoencoder.

Annotations are perturbed with bounded random offsets, a small
encoder-decoder learns a dense field that undoes the perturbation, and the
field is then applied to the original annotations.
"""

__version__ = "0.1.0"
