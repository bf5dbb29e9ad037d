"""Line-oriented dataset manifests, ground-truth sidecars and sequence frame selection.

Manifest layout::

    # facetune-manifest 1
    # fingerprint: 0123456789abcdef
    # neutral: neutral
    # styles: neutral,expr01,...        (optional; fixes the index order)
    # contents: id000,id001,...         (optional)
    meshes/mesh_00000.ply<TAB>id000<TAB>neutral<TAB>train

Paths are relative to the manifest's directory. Labels are free-form; the
neutral label maps to style index 0 and the rest follow in declared (or
sorted) order.
"""

from __future__ import annotations

import glob
import os
from dataclasses import dataclass, field

import numpy as np

from ..container import read_container, write_container
from ..exceptions import ConfigError, MeshFormatError, TopologyError
from ..mesh import Mesh, avd, load_mesh, save_mesh, topology_fingerprint
from .synth import GroundTruth, SynthDataset

HEADER = "# facetune-manifest 1"
GROUND_TRUTH_MAGIC = b"FTGT"
SPLITS = ("train", "test")


@dataclass(frozen=True)
class Record:
    path: str
    content: str
    style: str
    split: str


@dataclass
class DatasetManifest:
    records: list
    fingerprint: str
    base_dir: str = "."
    neutral_label: str = "neutral"
    style_labels: list = field(default=None)
    content_labels: list = field(default=None)

    def __post_init__(self):
        declared_styles = self.style_labels is not None
        declared_contents = self.content_labels is not None
        used_s = {r.style for r in self.records}
        used_c = {r.content for r in self.records}
        if declared_styles:
            unknown = used_s - set(self.style_labels)
            if unknown:
                raise ConfigError(f"unknown style labels {sorted(unknown)}")
        else:
            rest = sorted(used_s - {self.neutral_label})
            self.style_labels = ([self.neutral_label] if self.neutral_label in used_s else []) + rest
        if declared_contents:
            unknown = used_c - set(self.content_labels)
            if unknown:
                raise ConfigError(f"unknown content labels {sorted(unknown)}")
        else:
            self.content_labels = sorted(used_c)
        for r in self.records:
            if r.split not in SPLITS:
                raise ConfigError(f"{r.path}: split must be train or test, got {r.split!r}")
        self.style_labels = list(self.style_labels)
        self.content_labels = list(self.content_labels)
        self._s = {k: i for i, k in enumerate(self.style_labels)}
        self._c = {k: i for i, k in enumerate(self.content_labels)}

    @property
    def neutral_index(self) -> int:
        return self._s.get(self.neutral_label, 0)

    def style_index(self, label: str) -> int:
        if label not in self._s:
            raise ConfigError(f"unknown style label {label!r}")
        return self._s[label]

    def content_index(self, label: str) -> int:
        if label not in self._c:
            raise ConfigError(f"unknown content label {label!r}")
        return self._c[label]

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        """Yield ``(record, Mesh)``, loading meshes lazily."""
        for r in self.records:
            yield r, self.load_mesh(r)

    def resolve(self, r: Record) -> str:
        return r.path if os.path.isabs(r.path) else os.path.join(self.base_dir, r.path)

    def load_mesh(self, r: Record) -> Mesh:
        path = self.resolve(r)
        if not os.path.exists(path):
            raise FileNotFoundError(f"manifest entry missing on disk: {path}")
        m = load_mesh(path)
        if topology_fingerprint(m.faces) != self.fingerprint:
            raise TopologyError(f"{path}: topology fingerprint differs from the manifest's")
        return m

    def arrays(self, split: str | None = None):
        """``(vertices (N, V, 3), content idx, style idx, faces)`` of one split (or all)."""
        recs = [r for r in self.records if split is None or r.split == split]
        if not recs:
            raise ConfigError(f"no records in split {split!r}")
        meshes = [self.load_mesh(r) for r in recs]
        verts = np.stack([m.vertices for m in meshes])
        content = np.array([self._c[r.content] for r in recs], dtype=np.int64)
        style = np.array([self._s[r.style] for r in recs], dtype=np.int64)
        return verts, content, style, meshes[0].faces

    def record_ids(self, split: str | None = None) -> list[str]:
        return [r.path for r in self.records if split is None or r.split == split]


def write_manifest(manifest: DatasetManifest, path) -> str:
    lines = [HEADER, f"# fingerprint: {manifest.fingerprint}",
             f"# neutral: {manifest.neutral_label}",
             f"# styles: {','.join(manifest.style_labels)}",
             f"# contents: {','.join(manifest.content_labels)}"]
    for r in manifest.records:
        for v in (r.path, r.content, r.style):
            if "\t" in v or "\n" in v:
                raise ConfigError(f"manifest fields may not contain tabs or newlines: {v!r}")
        lines.append("\t".join((r.path, r.content, r.style, r.split)))
    text = "\n".join(lines) + "\n"
    with open(path, "w") as fh:
        fh.write(text)
    return text


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != HEADER:
        raise MeshFormatError(f"{path}: not a manifest (missing header)")
    meta, records = {}, []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        if line.startswith("#"):
            key, _, val = line[1:].partition(":")
            meta[key.strip()] = val.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise MeshFormatError(f"{path}:{lineno}: expected 4 tab-separated fields")
        records.append(Record(*parts))
    if "fingerprint" not in meta:
        raise MeshFormatError(f"{path}: missing fingerprint header")
    styles = meta["styles"].split(",") if meta.get("styles") else None
    contents = meta["contents"].split(",") if meta.get("contents") else None
    man = DatasetManifest(records, meta["fingerprint"], os.path.dirname(os.path.abspath(path)),
                          meta.get("neutral", "neutral"), styles, contents)
    if check_files:
        for r in records:
            if not os.path.exists(man.resolve(r)):
                raise FileNotFoundError(f"manifest entry missing on disk: {man.resolve(r)}")
    return man


# ground truth ------------------------------------------------------------------------

def save_ground_truth(gt: GroundTruth, path, digest: str = "") -> bytes:
    return write_container(GROUND_TRUTH_MAGIC, gt.arrays(), digest=digest, sink=path)


def load_ground_truth(path) -> GroundTruth:
    arrays, _, _ = read_container(path, GROUND_TRUTH_MAGIC)
    return GroundTruth.from_arrays(arrays)


def save_synth_dataset(ds: SynthDataset, outdir, digest: str = "") -> DatasetManifest:
    """Write meshes (binary PLY, exact doubles), ``manifest.txt`` and ``ground_truth.ftgt``."""
    mesh_dir = os.path.join(outdir, "meshes")
    os.makedirs(mesh_dir, exist_ok=True)
    records = []
    c_lab, s_lab = ds.content_labels, ds.style_labels
    for i, (v, c, s, sp) in enumerate(zip(ds.vertices, ds.content, ds.style, ds.split)):
        rel = f"meshes/mesh_{i:05d}.ply"
        save_mesh(Mesh(v, ds.faces), os.path.join(outdir, rel), binary=True)
        records.append(Record(rel, c_lab[c], s_lab[s], str(sp)))
    man = DatasetManifest(records, topology_fingerprint(ds.faces), os.path.abspath(outdir),
                          s_lab[0], list(s_lab), list(c_lab))
    write_manifest(man, os.path.join(outdir, "manifest.txt"))
    save_ground_truth(ds.ground_truth, os.path.join(outdir, "ground_truth.ftgt"), digest)
    return man


# sequence frame selection ------------------------------------------------------------------

def select_frames(frames, window: int = 10):
    """Pick the neutral and peak-expression frames of one captured sequence.

    The first frame is the neutral; the peak is the frame farthest (in AVD)
    from it, returned together with up to ``window`` frames on either side.

    Returns
    -------
    neutral : int
    peak : int
    selected : list of int
        Frame indices ``peak - window .. peak + window`` clipped to the sequence.
    """
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 3 or len(frames) < 2:
        raise ConfigError("a sequence needs at least two (V, 3) frames")
    d = avd(frames, np.broadcast_to(frames[0], frames.shape))
    peak = int(np.argmax(d))
    lo, hi = max(1, peak - window), min(len(frames) - 1, peak + window)
    return 0, peak, list(range(lo, hi + 1))


def manifest_from_sequences(root, out_path, window: int = 10, test_fraction: float = 0.1,
                            seed: int = 0, neutral_label: str = "neutral",
                            pattern: str = "*.ply") -> DatasetManifest:
    """Build a manifest from ``root/<subject>/<expression>/<frames>``.

    Each sequence contributes its first frame as a neutral sample and the
    window around its peak frame as samples of that expression.
    """
    from ..autodiff.init import rng_for

    records, fingerprint = [], None
    base = os.path.dirname(os.path.abspath(out_path))
    for subj in sorted(d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d))):
        for expr in sorted(os.listdir(os.path.join(root, subj))):
            files = sorted(glob.glob(os.path.join(root, subj, expr, pattern)))
            if len(files) < 2:
                continue
            meshes = [load_mesh(f) for f in files]
            fp = topology_fingerprint(meshes[0].faces)
            fingerprint = fingerprint or fp
            for f, m in zip(files, meshes):
                if topology_fingerprint(m.faces) != fingerprint:
                    raise TopologyError(f"{f}: topology fingerprint differs from the first sequence")
            neutral, _, picked = select_frames([m.vertices for m in meshes], window)
            records.append((os.path.relpath(files[neutral], base), subj, neutral_label))
            records += [(os.path.relpath(files[i], base), subj, expr) for i in picked]
    if not records:
        raise ConfigError(f"no sequences found under {root}")
    order = rng_for(seed, "manifest.split").permutation(len(records))
    n_test = int(round(len(records) * test_fraction))
    test = set(order[:n_test].tolist())
    recs = [Record(p, c, s, "test" if i in test else "train") for i, (p, c, s) in enumerate(records)]
    man = DatasetManifest(recs, fingerprint, base, neutral_label)
    write_manifest(man, out_path)
    return man
