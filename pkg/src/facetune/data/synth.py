"""Parametric face-like meshes with a known identity/expression decomposition.

A sample of identity ``c`` in expression ``s`` is::

    x = base + B_id @ a_c + (1 + gamma * tanh(w_s . a_c)) * B_exp[s] + noise

The identity fields are smooth low-order polynomial displacements; every
expression field is confined to a spherical-cap mask on the front of the
template, so the back of the head never moves. The gain term makes the
expression amplitude depend on identity, which defeats plain vertex-delta
transfer by a margin that is available in closed form.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..autodiff.init import rng_for
from ..exceptions import ConfigError
from ..mesh import Mesh, icosphere, load_mesh

NEUTRAL = 0


@dataclass
class SynthConfig:
    template: str | int = 3  # icosphere subdivision level, or a path to an OBJ
    n_identities: int = 24
    n_expressions: int = 10  # class 0 is neutral
    samples_per_cell: int = 3
    identity_rank: int = 6
    gamma: float = 0.5
    noise_std: float = 0.2
    seed: int = 0
    radii: tuple = (70.0, 90.0, 75.0)
    identity_scale: float = 3.0  # mean vertex displacement of one unit identity coefficient (mm)
    expression_scale: float = 5.0  # mean vertex displacement of each expression field (mm)
    gain_spread: float = 1.5  # norm of the gain direction w_s
    test_fraction: float = 0.1
    split_mode: str = "stratified"  # stratified | random

    def __post_init__(self):
        if self.n_expressions < 2:
            raise ConfigError("need the neutral class and at least one expression")
        if self.gamma < 0:
            raise ConfigError("gamma must be non-negative")
        if self.n_identities < 2 or self.samples_per_cell < 1 or self.identity_rank < 1:
            raise ConfigError("n_identities >= 2, samples_per_cell >= 1, identity_rank >= 1")
        if self.split_mode not in ("stratified", "random"):
            raise ConfigError("split_mode must be 'stratified' or 'random'")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        self.radii = tuple(float(r) for r in self.radii)


@dataclass
class GroundTruth:
    """Everything needed to evaluate the generator equation exactly."""

    base: np.ndarray  # (V, 3)
    identity_basis: np.ndarray  # (K, V, 3)
    expression_fields: np.ndarray  # (S, V, 3); row 0 is zero
    gain_directions: np.ndarray  # (S, K); row 0 unused
    identities: np.ndarray  # (C, K)
    gamma: float
    masks: np.ndarray = field(default=None)  # (S, V) in [0, 1]

    def gain(self, c: int, s: int) -> float:
        return float(np.tanh(self.gain_directions[s] @ self.identities[c]))

    def clean(self, c: int, s: int) -> np.ndarray:
        """Noise-free mesh of identity ``c`` in expression ``s``."""
        a = self.identities[c]
        x = self.base + np.tensordot(a, self.identity_basis, axes=1)
        if s != NEUTRAL:
            x = x + (1.0 + self.gamma * self.gain(c, s)) * self.expression_fields[s]
        return x

    def delta_transfer_residual(self, c: int, c_src: int, s: int) -> float:
        """Closed-form AVD between the vertex-delta transfer of ``c_src``'s
        expression ``s`` onto ``c`` and the true ``x(c, s)`` (noise-free)."""
        if s == NEUTRAL:
            return 0.0
        dg = abs(self.gain(c, s) - self.gain(c_src, s))
        return self.gamma * dg * float(np.linalg.norm(self.expression_fields[s], axis=1).mean())

    def mean_expression_displacement(self) -> float:
        """Mean over identities and non-neutral expressions of AVD(x(c,s), x(c,neutral))."""
        vals = [(1.0 + self.gamma * self.gain(c, s))
                * np.linalg.norm(self.expression_fields[s], axis=1).mean()
                for c in range(len(self.identities)) for s in range(1, len(self.expression_fields))]
        return float(np.mean(vals))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"base": self.base, "identity_basis": self.identity_basis,
                "expression_fields": self.expression_fields,
                "gain_directions": self.gain_directions, "identities": self.identities,
                "masks": self.masks, "gamma": np.array([self.gamma])}

    @classmethod
    def from_arrays(cls, d) -> "GroundTruth":
        return cls(d["base"], d["identity_basis"], d["expression_fields"], d["gain_directions"],
                   d["identities"], float(np.asarray(d["gamma"]).ravel()[0]), d.get("masks"))


def template_mesh(cfg: SynthConfig) -> Mesh:
    if isinstance(cfg.template, (int, np.integer)) or str(cfg.template).isdigit():
        sphere = icosphere(int(cfg.template))
        return Mesh(sphere.vertices * np.asarray(cfg.radii), sphere.faces)
    return load_mesh(str(cfg.template))


def _poly_features(u):
    x, y, z = u.T
    return np.stack([np.ones_like(x), x, y, z, x * x, y * y, z * z, x * y, y * z, z * x], axis=1)


def _normals(m: Mesh):
    v, f = m.vertices, m.faces
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, f[:, k], n)
    return out / np.linalg.norm(out, axis=1, keepdims=True)


def build_ground_truth(cfg: SynthConfig, template: Mesh) -> GroundTruth:
    rng = rng_for(cfg.seed, "synth.bases")
    base = template.vertices
    centre = base.mean(axis=0)
    u = (base - centre) / np.abs(base - centre).max(axis=0)
    feats = _poly_features(u)  # (V, 10)
    normals = _normals(template)

    basis = []
    for _ in range(cfg.identity_rank):
        coef = rng.standard_normal((feats.shape[1], 3))
        field = feats @ coef
        field *= cfg.identity_scale / np.linalg.norm(field, axis=1).mean()
        basis.append(field)
    basis = np.asarray(basis)

    # expression masks: caps whose centres sit on the front (+z) of the template
    direction = u / np.linalg.norm(u, axis=1, keepdims=True)
    n_expr = cfg.n_expressions
    fields = np.zeros((n_expr,) + base.shape)
    masks = np.zeros((n_expr, len(base)))
    for s in range(1, n_expr):
        while True:
            c = rng.standard_normal(3)
            c /= np.linalg.norm(c)
            if c[2] > 0.55:
                break
        radius = rng.uniform(0.45, 0.75)
        theta = np.arccos(np.clip(direction @ c, -1.0, 1.0))
        mask = np.where(theta < radius, np.cos(0.5 * np.pi * theta / radius) ** 2, 0.0)
        coef = rng.standard_normal((4, 3)) * 0.5
        field = normals * rng.choice([-1.0, 1.0]) + feats[:, :4] @ coef
        field = field * mask[:, None]
        field *= cfg.expression_scale / np.linalg.norm(field, axis=1).mean()
        fields[s] = field
        masks[s] = mask

    gains = rng.standard_normal((n_expr, cfg.identity_rank))
    gains *= cfg.gain_spread / np.linalg.norm(gains, axis=1, keepdims=True)
    gains[NEUTRAL] = 0.0
    ids = rng_for(cfg.seed, "synth.identities").standard_normal((cfg.n_identities, cfg.identity_rank))
    return GroundTruth(base.copy(), basis, fields, gains, ids, float(cfg.gamma), masks)


def generate_sample(gt: GroundTruth, c: int, s: int, noise_seed: int, noise_std: float,
                    counter: int = 0) -> np.ndarray:
    """Vertices of one noisy sample; ``noise_seed``/``counter`` select the noise draw."""
    if not 0 <= s < len(gt.expression_fields):
        raise ConfigError(f"expression class {s} out of range")
    if not 0 <= c < len(gt.identities):
        raise ConfigError(f"identity {c} out of range")
    x = gt.clean(c, s)
    if noise_std > 0:
        rng = rng_for(noise_seed, f"synth.noise.{c}.{s}", counter)
        x = x + rng.normal(0.0, noise_std, size=x.shape)
    return x


@dataclass
class SynthDataset:
    """In-memory synthetic dataset."""

    vertices: np.ndarray  # (N, V, 3)
    faces: np.ndarray
    content: np.ndarray  # (N,) identity index
    style: np.ndarray  # (N,) expression index
    split: np.ndarray  # (N,) "train" / "test"
    ground_truth: GroundTruth
    config: SynthConfig

    @property
    def content_labels(self) -> list[str]:
        return [f"id{c:03d}" for c in range(self.config.n_identities)]

    @property
    def style_labels(self) -> list[str]:
        return ["neutral"] + [f"expr{s:02d}" for s in range(1, self.config.n_expressions)]

    def subset(self, split: str):
        keep = self.split == split
        return self.vertices[keep], self.content[keep], self.style[keep]


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    template = template_mesh(cfg)
    gt = build_ground_truth(cfg, template)
    verts, content, style = [], [], []
    for c in range(cfg.n_identities):
        for s in range(cfg.n_expressions):
            for k in range(cfg.samples_per_cell):
                verts.append(generate_sample(gt, c, s, cfg.seed, cfg.noise_std, k))
                content.append(c)
                style.append(s)
    content, style = np.asarray(content), np.asarray(style)
    split = _split(cfg, content, style)
    return SynthDataset(np.asarray(verts), template.faces, content, style, split, gt, cfg)


def _split(cfg: SynthConfig, content, style) -> np.ndarray:
    """Hold out ``test_fraction`` of the records.

    ``stratified`` spreads the held-out records over identities: each
    identity contributes one neutral sample first, then samples of distinct
    randomly chosen expressions, so shared-cell metrics have material on the
    test side while every cell keeps training samples when it has more than one.
    """
    n = len(content)
    n_test = int(round(n * cfg.test_fraction))
    rng = rng_for(cfg.seed, "synth.split")
    split = np.full(n, "train", dtype=object)
    if cfg.split_mode == "random":
        split[rng.permutation(n)[:n_test]] = "test"
        return split.astype(str)
    n_id = cfg.n_identities
    quota = np.full(n_id, n_test // n_id)
    quota[rng.permutation(n_id)[:n_test % n_id]] += 1
    for c in range(n_id):
        others = 1 + rng.permutation(cfg.n_expressions - 1)
        cells = [NEUTRAL] + list(others)
        for k in range(min(quota[c], len(cells) * cfg.samples_per_cell)):
            s = cells[k % len(cells)]
            idx = np.flatnonzero((content == c) & (style == s) & (split == "train"))
            split[idx[rng.integers(len(idx))]] = "test"
    return split.astype(str)
