"""Identity/expression disentangling autoencoder for fixed-topology face meshes."""

__version__ = "0.1.0"

__all__ = ["FaceTuner"]


def __getattr__(name):
    # keep ``import facetune`` light; scikit-learn loads only when the estimator is used
    if name == "FaceTuner":
        from .estimator import FaceTuner
        return FaceTuner
    raise AttributeError(f"module 'facetune' has no attribute {name!r}")
