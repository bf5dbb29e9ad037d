"""Loss terms on the gradient tape.

Mesh distances default to the AVD form (mean per-vertex Euclidean distance)
and code/feature distances to mean absolute error, so the weights keep their
meaning across resolutions. ``mode="sum"`` switches to the raw norms.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from ..exceptions import ConfigError, ShapeError
from ..mesh.core import uniform_laplacian_matrix


@dataclass
class LossWeights:
    lambda_adv: float = 1.0
    lambda_feat: float = 1.0
    lambda_srec: float = 0.4
    lambda_lap: float = 0.05
    lambda_reg: float = 10.0

    def __post_init__(self):
        for k, v in vars(self).items():
            if v < 0:
                raise ConfigError(f"{k} must be non-negative")


def mesh_distance(a: Tensor, b, mode: str = "avd") -> Tensor:
    """Batch mean of AVD(a, b), or of the Frobenius norm with ``mode='sum'``."""
    a = ad.as_tensor(a)
    b = ad.as_tensor(b) if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"mesh shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    if mode == "avd":
        return ad.mean(ad.l2_norm(diff, axis=-1))
    if mode == "sum":
        return ad.mean(ad.l2_norm(diff, axis=(-2, -1)))
    raise ConfigError(f"unknown distance mode {mode!r}")


def code_distance(a: Tensor, b, mode: str = "avd") -> Tensor:
    """Mean absolute difference (or the batch-mean L1 norm with ``mode='sum'``)."""
    a = ad.as_tensor(a)
    b = ad.as_tensor(b) if isinstance(b, Tensor) else Tensor(np.asarray(b), dtype=a.dtype)
    if a.shape != b.shape:
        raise ShapeError(f"code shapes differ: {a.shape} vs {b.shape}")
    if mode == "avd":
        return ad.mean(ad.abs_(a - b))
    return ad.mean(ad.l1_norm(a - b, axis=-1))


def loss_rec(x, x_r, mode: str = "avd") -> Tensor:
    return mesh_distance(x_r, x, mode)


def loss_cycle(x, x_t, G, style_of_x=None, mode: str = "avd") -> Tensor:
    """Distance between ``Dec(E_c(x_t), E_s(x))`` and ``x``."""
    if style_of_x is None:
        style_of_x = G.encode_style(x)
    back = G.decode(G.encode_content(x_t), style_of_x)
    return mesh_distance(back, x, mode)


def loss_srec(code_t, code_ref, mode: str = "avd") -> Tensor:
    """Distance between the style code of the translation and a reference style code."""
    return code_distance(code_t, code_ref, mode)


def select_class(logits: Tensor, labels) -> Tensor:
    """Pick ``logits[i, labels[i]]`` for every row (other classes are ignored)."""
    logits = ad.as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    n_cls = logits.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_cls):
        raise ConfigError(f"class index out of range for {n_cls} discriminator outputs")
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(len(labels)), labels] = 1.0
    return ad.sum_(logits * Tensor(onehot), axis=-1)


def loss_adv_d(real_logit, fake_logit) -> Tensor:
    """``E[-log sigmoid(real)] + E[-log(1 - sigmoid(fake))]`` on class-selected logits."""
    real_logit, fake_logit = ad.as_tensor(real_logit), ad.as_tensor(fake_logit)
    return ad.mean(ad.softplus(-real_logit)) + ad.mean(ad.softplus(fake_logit))


def loss_adv_g(fake_logit) -> Tensor:
    """Non-saturating generator loss ``E[-log sigmoid(fake)]``."""
    return ad.mean(ad.softplus(-ad.as_tensor(fake_logit)))


def loss_feat(f_rec, f_x, f_trans, f_s) -> Tensor:
    """Feature matching: |D^f(x_r) - D^f(x)| + |D^f(x_t) - D^f(s)|, element means.

    ``f_x``/``f_s`` are features of real meshes and are treated as constants.
    """
    f_x = Tensor(f_x.data if isinstance(f_x, Tensor) else f_x)
    f_s = Tensor(f_s.data if isinstance(f_s, Tensor) else f_s)
    return ad.mean(ad.abs_(f_rec - f_x)) + ad.mean(ad.abs_(f_trans - f_s))


def loss_reg_r1(logits_fn, h_real, labels) -> Tensor:
    """``E[||grad_h D_s(h)||^2]`` at real inputs ``h_real`` for their true classes.

    ``logits_fn`` maps a batch of (normalised) meshes to ``(B, n_classes)``
    logits. The returned penalty is differentiable in the discriminator
    parameters via a create-graph backward pass.
    """
    h = h_real if isinstance(h_real, Tensor) and h_real.requires_grad else \
        Tensor(ad.as_tensor(h_real).data, requires_grad=True)
    out = select_class(logits_fn(h), labels)
    g = ad.grad(ad.sum_(out), h, create_graph=True)
    if not g.requires_grad:
        return Tensor(np.zeros((), dtype=h.dtype))
    per_sample = ad.squared_l2(ad.flatten(g, start_axis=1), axis=-1)
    return ad.mean(per_sample)


def r1_parameter_grads_fd(logits_fn, h_real, labels, params, h: float = 1e-5) -> list:
    """Central-difference gradients of the R1 penalty with respect to ``params``.

    Slow (two penalty evaluations per scalar); meant for cross-checking the
    create-graph path on small discriminators.
    """
    h_data = ad.as_tensor(h_real).data

    def penalty():
        return loss_reg_r1(logits_fn, Tensor(h_data, requires_grad=True), labels).item()

    grads = []
    for p in params:
        g = np.zeros(p.shape, dtype=np.float64)
        flat, gflat = p.data.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = penalty()
            flat[i] = old - h
            fm = penalty()
            flat[i] = old
            gflat[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


class LaplacianLoss:
    """Mean distance between every vertex and its one-ring centroid."""

    def __init__(self, faces, n_vertices: int):
        self.matrix, self.has_neighbors = uniform_laplacian_matrix(faces, n_vertices)
        self._keep = np.flatnonzero(self.has_neighbors)
        self._all = bool(self.has_neighbors.all())

    def __call__(self, x) -> Tensor:
        x = ad.as_tensor(x)
        d = ad.l2_norm(ad.sparse_matmul(self.matrix, x), axis=-1)
        if not self._all:
            d = ad.gather_rows(ad.reshape(d, d.shape + (1,)), self._keep)
        return ad.mean(d)
