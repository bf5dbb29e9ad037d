"""Reconstruction, identity-decomposition, neutralisation and transfer metrics.

Every metric reports AVD statistics in millimetres. Neutralisation and
transfer share one triplet sampler so model and baseline errors can be
compared draw by draw.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import autodiff as ad
from .autodiff.init import rng_for
from .exceptions import ConfigError, ShapeError
from .mesh.core import avd

NEUTRAL = 0


@dataclass
class EvalSet:
    """Labelled meshes used for evaluation.

    ``content``/``style`` are integer class indices; ``record_ids`` give a
    canonical order inside each (content, style) cell so that metrics do not
    depend on the order of records.
    """

    vertices: np.ndarray  # (N, V, 3)
    content: np.ndarray
    style: np.ndarray
    content_labels: list | None = None
    style_labels: list | None = None
    record_ids: list | None = None
    neutral: int = NEUTRAL

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.content = np.asarray(self.content, dtype=np.int64)
        self.style = np.asarray(self.style, dtype=np.int64)
        n = len(self.vertices)
        if self.vertices.ndim != 3 or len(self.content) != n or len(self.style) != n:
            raise ShapeError("EvalSet needs (N, V, 3) vertices and N content/style labels")
        if self.record_ids is None:
            self.record_ids = [hashlib.sha1(v.tobytes()).hexdigest() for v in self.vertices]
        if self.content_labels is None:
            self.content_labels = [str(c) for c in range(int(self.content.max()) + 1)]
        if self.style_labels is None:
            self.style_labels = [str(s) for s in range(int(self.style.max()) + 1)]
        cells = {}
        for i, key in enumerate(zip(self.content.tolist(), self.style.tolist())):
            cells.setdefault(key, []).append(i)
        self._cells = {k: sorted(v, key=lambda i: self.record_ids[i]) for k, v in cells.items()}

    def cell(self, c: int, s: int) -> list[int]:
        return self._cells.get((int(c), int(s)), [])

    @property
    def contents(self) -> list[int]:
        return sorted({c for c, _ in self._cells})

    def styles_of(self, c: int) -> list[int]:
        return sorted(s for cc, s in self._cells if cc == c)

    def with_neutral(self) -> list[int]:
        return [c for c in self.contents if self.cell(c, self.neutral)]


@dataclass
class MetricStats:
    mean: float
    std: float
    median: float
    n: int
    values: np.ndarray = field(repr=False, default=None)

    @classmethod
    def of(cls, values) -> "MetricStats":
        v = np.asarray(values, dtype=np.float64)
        if v.size == 0:
            return cls(float("nan"), float("nan"), float("nan"), 0, v)
        return cls(float(v.mean()), float(v.std()), float(np.median(v)), int(v.size), v)

    def row(self) -> dict:
        return {"mean": self.mean, "std": self.std, "median": self.median, "n": self.n}


@dataclass
class EvalReport:
    metrics: dict = field(default_factory=dict)  # name -> MetricStats
    per_class: dict = field(default_factory=dict)  # name -> {style label -> MetricStats}
    metadata: dict = field(default_factory=dict)

    def to_csv(self, sink=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "class", "mean", "std", "median", "n"])
        for name, st in self.metrics.items():
            w.writerow([name, "all", repr(st.mean), repr(st.std), repr(st.median), st.n])
            for label, cst in self.per_class.get(name, {}).items():
                w.writerow([name, label, repr(cst.mean), repr(cst.std), repr(cst.median), cst.n])
        text = buf.getvalue()
        if sink is not None:
            with open(sink, "w") as fh:
                fh.write(text)
        return text

    def summary(self) -> str:
        d = {"metadata": self.metadata,
             "metrics": {k: v.row() for k, v in self.metrics.items()}}
        return yaml.safe_dump(d, sort_keys=False)


# generator access ---------------------------------------------------------------

def _np(t) -> np.ndarray:
    return t.data if isinstance(t, ad.Tensor) else np.asarray(t)


def _batched(fn, x, chunk: int = 32):
    x = np.asarray(x, dtype=np.float64)
    out = [_np(fn(x[i:i + chunk])) for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)


def encode(G, x):
    """``(content codes, style codes)`` of a batch, as float64 arrays."""
    with ad.no_grad():
        return (_batched(G.encode_content, x).astype(np.float64),
                _batched(G.encode_style, x).astype(np.float64))


def decode(G, content, style, chunk: int = 32) -> np.ndarray:
    content, style = np.atleast_2d(content), np.atleast_2d(style)
    dtype = getattr(G, "dtype", np.float64)
    with ad.no_grad():
        out = [_np(G.decode(ad.Tensor(content[i:i + chunk], dtype=dtype),
                            ad.Tensor(style[i:i + chunk], dtype=dtype)))
               for i in range(0, len(content), chunk)]
    return np.concatenate(out, axis=0).astype(np.float64)


def reconstruct(G, x) -> np.ndarray:
    """``Dec(E_c(x), E_s(x))`` computed in a single pass per chunk."""
    with ad.no_grad():
        return _batched(lambda b: G.decode(G.encode_content(b), G.encode_style(b)), x).astype(np.float64)


def translate(G, x, s) -> np.ndarray:
    x, s = np.asarray(x, dtype=np.float64), np.asarray(s, dtype=np.float64)
    if x.shape != s.shape:
        raise ShapeError(f"content and style batches differ: {x.shape} vs {s.shape}")
    with ad.no_grad():
        out = [_np(G.decode(G.encode_content(x[i:i + 32]), G.encode_style(s[i:i + 32])))
               for i in range(0, len(x), 32)]
    return np.concatenate(out, axis=0).astype(np.float64)


# sampler -------------------------------------------------------------------------

@dataclass
class Triplets:
    c: np.ndarray
    c_other: np.ndarray
    s: np.ndarray
    idx_cs: np.ndarray  # x_{c,s}
    idx_cn: np.ndarray  # x_{c,neutral}
    idx_os: np.ndarray  # x_{c',s}
    idx_on: np.ndarray  # x_{c',neutral}

    def __len__(self):
        return len(self.c)


def default_draws(eval_set: EvalSet) -> int:
    return 10 * len(eval_set.contents)


def sample_triplets(eval_set: EvalSet, n: int | None = None, seed: int = 0) -> Triplets:
    """Draw ``(c, c' != c, s != neutral)`` with all four cells present.

    Draws are a function of class labels, the canonical record order and
    ``seed`` only.
    """
    n = default_draws(eval_set) if n is None else int(n)
    nz = eval_set.neutral
    valid = eval_set.with_neutral()
    options = []  # (c, s, [c' ...])
    for c in valid:
        for s in eval_set.styles_of(c):
            if s == nz:
                continue
            others = [o for o in valid if o != c and eval_set.cell(o, s)]
            if others:
                options.append((c, s, others))
    if not options:
        raise ConfigError("no (c, c', s) combination has all required cells in the evaluation set")
    rng = rng_for(seed, "eval.triplets")
    cols = [[] for _ in range(7)]
    for _ in range(n):
        c, s, others = options[rng.integers(len(options))]
        o = others[rng.integers(len(others))]
        picks = [eval_set.cell(c, s), eval_set.cell(c, nz), eval_set.cell(o, s), eval_set.cell(o, nz)]
        vals = [c, o, s] + [cell[rng.integers(len(cell))] for cell in picks]
        for col, v in zip(cols, vals):
            col.append(v)
    return Triplets(*(np.asarray(col, dtype=np.int64) for col in cols))


# metrics ---------------------------------------------------------------------------

def eval_reconstruction(eval_set: EvalSet, G) -> MetricStats:
    x = eval_set.vertices
    return MetricStats.of(avd(reconstruct(G, x), x))


def eval_identity_decomposition(eval_set: EvalSet, G, seed: int = 0,
                                pairwise: bool = False) -> MetricStats:
    """Mean over content classes of the spread of neutralised outputs.

    For class ``c`` a random ``c'`` with a neutral sample supplies the style
    code; ``sigma_c`` is the RMS AVD of the outputs to their mean mesh, or
    the mean pairwise AVD with ``pairwise=True``.
    """
    ev = eval_set
    valid = ev.with_neutral()
    rng = rng_for(seed, "eval.identity_decomposition")
    sigmas = []
    for c in ev.contents:
        styles = ev.styles_of(c)
        others = [o for o in valid if o != c]
        if not others:
            raise ConfigError(f"content class {ev.content_labels[c]} has no partner with a neutral sample")
        o = others[rng.integers(len(others))]
        neutral_cell = ev.cell(o, ev.neutral)
        ref = ev.vertices[neutral_cell[rng.integers(len(neutral_cell))]]
        idx = []
        for s in styles:
            cell = ev.cell(c, s)
            idx.append(cell[rng.integers(len(cell))])
        if len(idx) < 2:
            continue
        xs = ev.vertices[idx]
        content, _ = encode(G, xs)
        _, style = encode(G, ref[None])
        ys = decode(G, content, np.repeat(style, len(idx), axis=0))
        if pairwise:
            d = [avd(ys[a], ys[b]) for a in range(len(ys)) for b in range(a + 1, len(ys))]
            sigmas.append(float(np.mean(d)))
        else:
            d = avd(ys, np.broadcast_to(ys.mean(axis=0), ys.shape))
            sigmas.append(float(np.sqrt(np.mean(d ** 2))))
    return MetricStats.of(sigmas)


def eval_neutralization(eval_set: EvalSet, G, n: int | None = None, seed: int = 0,
                        triplets: Triplets | None = None) -> MetricStats:
    t = triplets or sample_triplets(eval_set, n, seed)
    v = eval_set.vertices
    content, _ = encode(G, v[t.idx_cs])
    _, style = encode(G, v[t.idx_on])
    y = decode(G, content, style)
    return MetricStats.of(avd(v[t.idx_cn], y))


def copy_input_neutralization(eval_set: EvalSet, triplets: Triplets) -> MetricStats:
    """Error of returning the expressive input unchanged."""
    v = eval_set.vertices
    return MetricStats.of(avd(v[triplets.idx_cs], v[triplets.idx_cn]))


def _per_class(eval_set: EvalSet, t: Triplets, errors) -> dict:
    out = {}
    for s in sorted(set(t.s.tolist())):
        out[str(eval_set.style_labels[s])] = MetricStats.of(errors[t.s == s])
    return out


def eval_transfer(eval_set: EvalSet, G, n: int | None = None, seed: int = 0,
                  triplets: Triplets | None = None):
    """Transfer error overall and per style class: ``(stats, {label: stats})``."""
    t = triplets or sample_triplets(eval_set, n, seed)
    v = eval_set.vertices
    content, _ = encode(G, v[t.idx_cn])
    _, style = encode(G, v[t.idx_os])
    x_t = decode(G, content, style)
    err = avd(v[t.idx_cs], x_t)
    return MetricStats.of(err), _per_class(eval_set, t, err)


def baseline_delta_transfer(target_neutral, source_neutral, source_expr) -> np.ndarray:
    """Vertex-delta transfer ``x_{c,n} + (x_{c',s} - x_{c',n})``."""
    arrs = []
    for m in (target_neutral, source_neutral, source_expr):
        arrs.append(np.asarray(m.vertices if hasattr(m, "vertices") else m, dtype=np.float64))
    a, b, c = arrs
    if not a.shape == b.shape == c.shape:
        raise ShapeError(f"vertex arrays differ: {a.shape}, {b.shape}, {c.shape}")
    # target minus source neutral first: exact when both neutrals coincide
    return (a - b) + c


def eval_baseline_transfer(eval_set: EvalSet, triplets: Triplets):
    v = eval_set.vertices
    x_t = baseline_delta_transfer(v[triplets.idx_cn], v[triplets.idx_on], v[triplets.idx_os])
    err = avd(v[triplets.idx_cs], x_t)
    return MetricStats.of(err), _per_class(eval_set, triplets, err)


METRICS = ("rec", "iddecomp", "neutral", "transfer")


def evaluate(eval_set: EvalSet, G, metrics=METRICS, n: int | None = None, seed: int = 0,
             metadata: dict | None = None) -> EvalReport:
    """Run the requested metrics plus their baselines on shared draws."""
    unknown = set(metrics) - set(METRICS)
    if unknown:
        raise ConfigError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    rep = EvalReport(metadata=dict(metadata or {}))
    rep.metadata.update({"seed": seed, "transfer_baseline": "vertex-delta"})
    if "rec" in metrics:
        rep.metrics["rec"] = eval_reconstruction(eval_set, G)
    if "iddecomp" in metrics:
        rep.metrics["iddecomp"] = eval_identity_decomposition(eval_set, G, seed)
    if "neutral" in metrics or "transfer" in metrics:
        t = sample_triplets(eval_set, n, seed)
        rep.metadata["draws"] = len(t)
        if "neutral" in metrics:
            rep.metrics["neutral"] = eval_neutralization(eval_set, G, triplets=t)
            rep.metrics["neutral_copy_input"] = copy_input_neutralization(eval_set, t)
        if "transfer" in metrics:
            rep.metrics["transfer"], rep.per_class["transfer"] = eval_transfer(eval_set, G, triplets=t)
            base, base_cls = eval_baseline_transfer(eval_set, t)
            rep.metrics["transfer_baseline"], rep.per_class["transfer_baseline"] = base, base_cls
    return rep


# latent paths ------------------------------------------------------------------------

def _codes_of(G, a):
    if isinstance(a, tuple) and len(a) == 2:
        return np.asarray(a[0], dtype=np.float64), np.asarray(a[1], dtype=np.float64)
    x = np.asarray(a.vertices if hasattr(a, "vertices") else a, dtype=np.float64)
    c, s = encode(G, x[None])
    return c[0], s[0]


def latent_path(G, a, b, space: str, step: float, indices, base: str = "a") -> list:
    """Decode ``origin + i * step * (B - A)`` in ``space`` for each ``i``.

    ``a``/``b`` are meshes or ``(content, style)`` code pairs; the code of
    the other space stays at A's. ``base`` chooses the origin (A or B).
    """
    if space not in ("content", "style"):
        raise ConfigError("space must be 'content' or 'style'")
    ca, sa = _codes_of(G, a)
    cb, sb = _codes_of(G, b)
    za, zb = (ca, cb) if space == "content" else (sa, sb)
    origin = za if base == "a" else zb
    indices = list(indices)
    if not indices:
        return []
    z = np.stack([origin + i * step * (zb - za) for i in indices])
    other = np.repeat((sa if space == "content" else ca)[None], len(indices), axis=0)
    out = decode(G, z, other) if space == "content" else decode(G, other, z)
    return list(out)


def interpolate_latent(G, a, b, space: str = "style", step: float = 0.25, count: int = 4) -> list:
    """Meshes at ``A + i * step * (B - A)`` for ``i = 0..count``."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    return latent_path(G, a, b, space, step, range(count + 1))


def extrapolate_latent(G, a, b, space: str = "style", step: float = 0.5, count: int = 4) -> list:
    """Meshes beyond B at ``B + i * step * (B - A)`` for ``i = 1..count``."""
    if count < 0:
        raise ConfigError("count must be >= 0")
    return latent_path(G, a, b, space, step, range(1, count + 1), base="b")
