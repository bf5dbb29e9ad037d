"""scikit-learn style wrapper around topology building, training and inference."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .config import RunConfig
from .eval import encode, reconstruct
from .eval import decode as _decode
from .eval import translate as _translate
from .exceptions import ConfigError, ShapeError
from .mesh import Mesh, avd, build_topology, validate_faces
from .training import Trainer


def check_mesh_batch(X, n_vertices: int | None = None) -> np.ndarray:
    """Coerce ``X`` to a finite float64 ``(N, V, 3)`` array.

    Flat ``(N, 3V)`` rows and a single ``(V, 3)`` mesh are accepted.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2 and X.shape[1] == 3 and n_vertices is not None and X.shape[0] == n_vertices:
        X = X[None]
    elif X.ndim == 2:
        if X.shape[1] % 3:
            raise ShapeError(f"flat mesh rows need a multiple of 3 columns, got {X.shape[1]}")
        X = X.reshape(len(X), -1, 3)
    if X.ndim != 3 or X.shape[-1] != 3:
        raise ShapeError(f"expected meshes of shape (N, V, 3), got {X.shape}")
    if n_vertices is not None and X.shape[1] != n_vertices:
        raise ShapeError(f"expected {n_vertices} vertices per mesh, got {X.shape[1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("mesh coordinates contain NaN or inf")
    return X


def check_style_labels(y, n: int, neutral_label=None):
    """Map labels to indices with ``neutral_label`` first; returns ``(indices, classes)``."""
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ShapeError(f"need one style label per mesh ({n}), got shape {y.shape}")
    present = set(y.tolist())
    if neutral_label is not None and neutral_label not in present:
        raise ConfigError(f"neutral label {neutral_label!r} does not occur in y")
    rest = present - {neutral_label}
    try:
        rest = sorted(rest)
    except TypeError:  # mixed label types
        rest = sorted(rest, key=str)
    classes = ([neutral_label] if neutral_label in present else []) + rest
    lookup = {c: i for i, c in enumerate(classes)}
    return np.array([lookup[v] for v in y.tolist()], dtype=np.int64), classes


class FaceTuner(BaseEstimator, TransformerMixin):
    """Content/style disentangling mesh GAN.

    Parameters
    ----------
    faces : array of int, shape (F, 3)
        Shared triangle list of all meshes.
    preset : str
        Architecture preset name.
    architecture : dict, optional
        Field overrides on top of the preset (channel widths, code sizes, ...).
    epochs, batch_size, learning_rate, weight_decay : training schedule.
    lambda_adv, lambda_feat, lambda_srec, lambda_lap, lambda_reg : loss weights.
    precision : {32, 64}
    seed : int
    neutral_label : label of the neutral style in ``y``; listed first in ``classes_``.
    max_seconds : float, optional
        Wall-clock budget for :meth:`fit`.

    Attributes
    ----------
    generator_, discriminator_, topology_, classes_, trainer_, n_features_in_
    """

    def __init__(self, faces=None, preset="synth", architecture=None, epochs=40, batch_size=8, learning_rate=1e-4,
                 weight_decay=5e-5, lambda_adv=1.0, lambda_feat=1.0, lambda_srec=0.4,
                 lambda_lap=0.05, lambda_reg=10.0, precision=32, seed=0, neutral_label=None,
                 max_seconds=None):
        self.faces = faces
        self.preset = preset
        self.architecture = architecture
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.lambda_adv = lambda_adv
        self.lambda_feat = lambda_feat
        self.lambda_srec = lambda_srec
        self.lambda_lap = lambda_lap
        self.lambda_reg = lambda_reg
        self.precision = precision
        self.seed = seed
        self.neutral_label = neutral_label
        self.max_seconds = max_seconds

    def run_config(self) -> RunConfig:
        return RunConfig.from_dict({
            "seed": int(self.seed),
            "architecture": {"preset": self.preset, **(self.architecture or {})},
            "loss": {"lambda_adv": self.lambda_adv, "lambda_feat": self.lambda_feat,
                     "lambda_srec": self.lambda_srec, "lambda_lap": self.lambda_lap,
                     "lambda_reg": self.lambda_reg},
            "optim": {"learning_rate": self.learning_rate, "weight_decay": self.weight_decay},
            "train": {"epochs": self.epochs, "batch_size": self.batch_size,
                      "precision": self.precision},
        })

    def fit(self, X, y):
        """Build the topology from the mean training mesh and train G and D."""
        if self.faces is None:
            raise ConfigError("FaceTuner needs the shared 'faces' array")
        X = check_mesh_batch(X)
        faces = validate_faces(self.faces, X.shape[1])
        labels, self.classes_ = check_style_labels(y, len(X), self.neutral_label)
        cfg = self.run_config()
        arch = cfg.arch(n_vertices=X.shape[1], n_styles=len(self.classes_))
        self.topology_ = build_topology(Mesh(X.mean(axis=0), faces), arch.n_downsamplings,
                                        arch.factor, arch.spiral_length, arch.dilation)
        self.trainer_ = Trainer(cfg, self.topology_, X, labels, len(self.classes_), arch=arch)
        self.trainer_.train(self.epochs, max_seconds=self.max_seconds)
        self.generator_ = self.trainer_.G
        self.discriminator_ = self.trainer_.D
        self.n_features_in_ = X.shape[1] * 3
        return self

    @property
    def n_vertices_(self) -> int:
        return self.n_features_in_ // 3

    def transform(self, X):
        """Concatenated ``[content, style]`` codes, shape ``(N, content_dim + style_dim)``."""
        check_is_fitted(self, "generator_")
        c, s = encode(self.generator_, check_mesh_batch(X, self.n_vertices_))
        return np.concatenate([c, s], axis=1)

    def inverse_transform(self, Z):
        check_is_fitted(self, "generator_")
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        k = self.generator_.config.content_dim
        if Z.shape[1] != k + self.generator_.config.style_dim:
            raise ShapeError(f"codes need {k + self.generator_.config.style_dim} columns")
        return _decode(self.generator_, Z[:, :k], Z[:, k:])

    def reconstruct(self, X):
        check_is_fitted(self, "generator_")
        return reconstruct(self.generator_, check_mesh_batch(X, self.n_vertices_))

    def translate(self, X, S):
        """Content of ``X`` rendered in the style of ``S`` (one style mesh or one per row)."""
        check_is_fitted(self, "generator_")
        X = check_mesh_batch(X, self.n_vertices_)
        S = check_mesh_batch(S, self.n_vertices_)
        if len(S) == 1 and len(X) > 1:
            S = np.repeat(S, len(X), axis=0)
        return _translate(self.generator_, X, S)

    def neutralize(self, X, neutral_exemplar):
        return self.translate(X, neutral_exemplar)

    def score(self, X, y=None):
        """Negative mean reconstruction AVD (higher is better)."""
        X = check_mesh_batch(X, self.n_vertices_)
        return -float(np.mean(avd(self.reconstruct(X), X)))
