"""Alternating discriminator / generator optimisation, batching and checkpoints."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Adam, Tensor
from ..autodiff.init import rng_for
from ..container import read_container, write_container
from ..exceptions import ConfigError, MeshFormatError, NumericalError, TopologyError
from ..mesh.topology import TopologyAssets
from ..model import ArchitectureConfig, Discriminator, Generator
from .losses import (LaplacianLoss, code_distance, loss_adv_d, loss_adv_g, loss_feat,
                     loss_reg_r1, mesh_distance, r1_parameter_grads_fd, select_class)

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"FTGN"
G_TERMS = ("rec", "cycle", "srec", "adv", "feat", "lap")
D_TERMS = ("adv", "r1")
TELEMETRY_FIELDS = (["step", "epoch"] + [f"d_{t}" for t in D_TERMS] + ["d_total", "d_acc"]
                    + [f"g_{t}" for t in G_TERMS] + ["g_total", "wall_clock"])


def _dtype(precision: int):
    return np.float64 if precision == 64 else np.float32


def _finite_or_raise(name: str, value: Tensor, step: int):
    if not np.all(np.isfinite(value.data)):
        raise NumericalError(f"non-finite loss term '{name}' at step {step}")


@dataclass
class TrainState:
    """Counters and running averages; parameters and moments live on the networks."""

    step: int = 0
    epoch: int = 0
    running: dict = field(default_factory=dict)

    def update_running(self, report: dict, beta: float = 0.98):
        for k, v in report.items():
            if k in ("step", "epoch", "wall_clock"):
                continue
            prev = self.running.get(k)
            self.running[k] = v if prev is None else beta * prev + (1 - beta) * v


class Trainer:
    """Owns G, D, their optimisers and the batch schedule for one run.

    Parameters
    ----------
    config : RunConfig
    topology : TopologyAssets
    vertices : ndarray, shape (N, V, 3)
        Training meshes in millimetres.
    styles : ndarray of int, shape (N,)
        Style (expression) class of every training mesh.
    n_styles : int, optional
        Number of style classes; defaults to ``styles.max() + 1``.
    """

    def __init__(self, config, topology: TopologyAssets, vertices, styles, n_styles=None,
                 arch: ArchitectureConfig | None = None):
        vertices = np.asarray(vertices, dtype=np.float64)
        styles = np.asarray(styles, dtype=np.int64)
        if vertices.ndim != 3 or len(vertices) != len(styles):
            raise ConfigError("vertices must be (N, V, 3) with one style label per mesh")
        if vertices.shape[1] != topology.level_sizes[0]:
            raise TopologyError(f"dataset meshes have {vertices.shape[1]} vertices, "
                                f"topology expects {topology.level_sizes[0]}")
        if len(vertices) == 0:
            raise ConfigError("empty training set")
        self.config = config
        self.topology = topology
        self.vertices = vertices
        self.styles = styles
        n_styles = int(n_styles if n_styles is not None else styles.max() + 1)
        self.arch = arch or config.arch(n_vertices=vertices.shape[1], n_styles=n_styles)
        if self.arch.n_styles < n_styles:
            raise ConfigError(f"architecture has {self.arch.n_styles} style outputs, data {n_styles}")
        opts = config.train
        self.dtype = _dtype(opts.precision)
        with ad.default_dtype(self.dtype):
            self.G = Generator(self.arch, topology, config.seed)
            self.D = Discriminator(self.arch, topology, config.seed)
        offset = vertices.mean(axis=0)
        scale = float(np.sqrt(np.mean((vertices - offset) ** 2))) or 1.0
        self.G.set_normalization(offset, scale)
        self.D.set_normalization(offset, scale)
        self.opt_g = Adam(self.G.parameters(), config.optim)
        self.opt_d = Adam(self.D.parameters(), config.optim)
        self.laplacian = LaplacianLoss(topology.faces[0], vertices.shape[1])
        self.state = TrainState()
        self._by_class = [np.flatnonzero(styles == k) for k in range(n_styles)]
        self._present = np.array([k for k, idx in enumerate(self._by_class) if len(idx)])

    # batching -------------------------------------------------------------
    @property
    def batch_size(self) -> int:
        return min(self.config.train.batch_size, len(self.vertices))

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.vertices) / self.batch_size)

    def batch_indices(self, step: int):
        """``(x_idx, s_idx)`` for a global step; a pure function of seed and step."""
        b, n = self.batch_size, len(self.vertices)
        epoch, j = divmod(step, self.steps_per_epoch)
        perm = rng_for(self.config.seed, "batch.content", epoch).permutation(n)
        x_idx = np.resize(np.roll(perm, -j * b), b)
        rng = rng_for(self.config.seed, "batch.style", step)
        classes = rng.choice(self._present, size=b)
        s_idx = np.array([rng.choice(self._by_class[k]) for k in classes])
        return x_idx, s_idx

    # single updates ---------------------------------------------------------
    def discriminator_step(self, x, s, s_labels) -> dict:
        # the run's precision governs every tensor it creates, whatever the caller's default
        with ad.default_dtype(self.dtype):
            return self._discriminator_step(x, s, s_labels)

    def generator_step(self, x, s, s_labels) -> dict:
        with ad.default_dtype(self.dtype):
            return self._generator_step(x, s, s_labels)

    def _discriminator_step(self, x, s, s_labels) -> dict:
        cfg = self.config
        w = cfg.loss
        G, D = self.G, self.D
        with ad.no_grad():
            x_t = G.translate(x, s)
        h_real = D.normalize(s)
        if w.lambda_reg > 0:
            h_real = Tensor(h_real.data, requires_grad=True)
        logits_real, _ = D.forward_normalized(h_real)
        logits_fake, _ = D(Tensor(x_t.data))
        real_s = select_class(logits_real, s_labels)
        fake_s = select_class(logits_fake, s_labels)
        adv = loss_adv_d(real_s, fake_s)
        _finite_or_raise("d_adv", adv, self.state.step)
        total = adv
        r1_val = 0.0
        fd_grads = None
        if w.lambda_reg > 0:
            logits_fn = lambda h: D.forward_normalized(h)[0]  # noqa: E731
            r1 = loss_reg_r1(logits_fn, h_real, s_labels)
            _finite_or_raise("d_r1", r1, self.state.step)
            r1_val = r1.item()
            if cfg.train.r1_gradient == "finite_difference":
                fd_grads = r1_parameter_grads_fd(logits_fn, h_real, s_labels, D.parameters())
                total = Tensor(adv.data + w.lambda_reg * r1.data)
            else:
                total = total + r1 * w.lambda_reg
        self.opt_d.zero_grad()
        adv.backward() if fd_grads is not None else total.backward()
        if fd_grads is not None:
            for p, g in zip(D.parameters(), fd_grads):
                p.grad = p.grad + w.lambda_reg * g.astype(p.dtype)
        self.opt_d.step()
        acc = 0.5 * (np.mean(real_s.data > 0) + np.mean(fake_s.data < 0))
        return {"d_adv": adv.item(), "d_r1": r1_val, "d_total": total.item(), "d_acc": float(acc)}

    def _generator_step(self, x, s, s_labels) -> dict:
        cfg = self.config
        w, mode = cfg.loss, cfg.train.distance
        G, D = self.G, self.D
        step = self.state.step
        x_arr = np.asarray(x, dtype=np.float64)
        c_x = G.encode_content(x_arr)
        z_x = G.encode_style(x_arr)
        z_s = G.encode_style(s)
        x_r = G.decode(c_x, z_x)
        x_t = G.decode(c_x, z_s)
        terms = {}
        terms["rec"] = mesh_distance(x_r, x_arr, mode)
        _finite_or_raise("rec", terms["rec"], step)
        terms["cycle"] = mesh_distance(G.decode(G.encode_content(x_t), z_x), x_arr, mode)
        _finite_or_raise("cycle", terms["cycle"], step)
        weighted = {"rec": 1.0, "cycle": 1.0, "srec": w.lambda_srec, "adv": w.lambda_adv,
                    "feat": w.lambda_feat, "lap": w.lambda_lap}
        if w.lambda_srec > 0:
            ref = z_x if cfg.train.srec_target == "input" else z_s
            terms["srec"] = code_distance(G.encode_style(x_t), Tensor(ref.data), mode)
            _finite_or_raise("srec", terms["srec"], step)
        if w.lambda_adv > 0 or w.lambda_feat > 0:
            with D.frozen():
                logits, feats = D(ad.concat([x_r, x_t], axis=0))
                with ad.no_grad():
                    _, real_feats = D(np.concatenate([x_arr, np.asarray(s)], axis=0))
            b = x_arr.shape[0]
            if w.lambda_adv > 0:
                terms["adv"] = loss_adv_g(select_class(logits[b:], s_labels))
                _finite_or_raise("adv", terms["adv"], step)
            if w.lambda_feat > 0:
                terms["feat"] = loss_feat(feats[:b], real_feats.data[:b], feats[b:], real_feats.data[b:])
                _finite_or_raise("feat", terms["feat"], step)
        if w.lambda_lap > 0:
            terms["lap"] = self.laplacian(x_t)
            _finite_or_raise("lap", terms["lap"], step)
        total = None
        for name, val in terms.items():
            part = val if weighted[name] == 1.0 else val * weighted[name]
            total = part if total is None else total + part
        self.opt_g.zero_grad()
        total.backward()
        self.opt_g.step()
        report = {f"g_{t}": (terms[t].item() if t in terms else 0.0) for t in G_TERMS}
        report["g_total"] = total.item()
        return report

    def step(self) -> dict:
        """One discriminator update followed by one generator update."""
        st = self.state
        x_idx, s_idx = self.batch_indices(st.step)
        x, s, s_labels = self.vertices[x_idx], self.vertices[s_idx], self.styles[s_idx]
        report = {"step": st.step, "epoch": st.epoch}
        report.update(self.discriminator_step(x, s, s_labels))
        report.update(self.generator_step(x, s, s_labels))
        st.step += 1
        st.epoch = st.step // self.steps_per_epoch
        st.update_running(report)
        return report

    # loop ---------------------------------------------------------------------
    def train(self, epochs: int, output_dir=None, checkpoint_every: int | None = None,
              max_seconds: float | None = None, callback=None) -> TrainState:
        """Train until ``epochs`` full epochs have been completed (counted from step 0).

        Checkpoints go to ``output_dir`` every ``checkpoint_every`` epochs and
        at the end; telemetry is appended to ``output_dir/telemetry.csv``. A
        non-finite loss writes ``nan_dump.ftgn`` (state before the failing
        step) and re-raises.
        """
        every = checkpoint_every or self.config.train.checkpoint_every
        target = epochs * self.steps_per_epoch
        writer = fh = None
        if output_dir is not None:
            os.makedirs(output_dir, exist_ok=True)
            path = os.path.join(output_dir, "telemetry.csv")
            new = not os.path.exists(path) or self.state.step == 0
            fh = open(path, "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=TELEMETRY_FIELDS)
            if new:
                writer.writeheader()
            if self.state.step == 0:
                self.save_checkpoint(os.path.join(output_dir, "ckpt_e0000.ftgn"))
        t0 = time.perf_counter()
        start = self.state.step
        try:
            while self.state.step < target:
                try:
                    report = self.step()
                except NumericalError:
                    if output_dir is not None:
                        self.save_checkpoint(os.path.join(output_dir, "nan_dump.ftgn"))
                    raise
                report["wall_clock"] = round(time.perf_counter() - t0, 3)
                if writer is not None:
                    writer.writerow(report)
                if callback is not None:
                    callback(report)
                done_epoch = self.state.step % self.steps_per_epoch == 0
                if done_epoch:
                    e = self.state.epoch
                    log.info("epoch %d: %s", e, {k: round(v, 4) for k, v in self.state.running.items()})
                    if output_dir is not None and (e % every == 0 or self.state.step >= target):
                        self.save_checkpoint(os.path.join(output_dir, f"ckpt_e{e:04d}.ftgn"))
                if max_seconds is not None and time.perf_counter() - t0 > max_seconds:
                    log.warning("time budget exhausted at step %d", self.state.step)
                    break
        finally:
            if fh is not None:
                fh.close()
        if output_dir is not None and self.state.step > start:
            self.save_checkpoint(os.path.join(output_dir, "latest.ftgn"))
        return self.state

    # persistence ----------------------------------------------------------------
    def state_arrays(self) -> dict:
        arrays = {"meta/step": np.array([self.state.step]), "meta/epoch": np.array([self.state.epoch]),
                  "meta/precision": np.array([self.config.train.precision]),
                  "meta/arch": _text_array(json.dumps(self.arch.to_dict(), sort_keys=True)),
                  "meta/running": _text_array(json.dumps(self.state.running, sort_keys=True)),
                  "topology": np.frombuffer(self.topology.save(), dtype=np.uint8)}
        offset, scale = self.G.normalization
        arrays["norm/offset"] = offset
        arrays["norm/scale"] = np.array([scale])
        for tag, net in (("G", self.G), ("D", self.D)):
            for name, p in net.named_parameters():
                arrays[f"{tag}/{name}"] = p.data
                arrays[f"{tag}/{name}@m"] = p.adam_m
                arrays[f"{tag}/{name}@v"] = p.adam_v
                arrays[f"{tag}/{name}@t"] = np.array([p.step_count])
        return arrays

    def save_checkpoint(self, path):
        write_container(CHECKPOINT_MAGIC, self.state_arrays(), text=self.config.dumps(),
                        digest=self.config.hash(), sink=path)

    def load_state(self, arrays: dict):
        if "topology" in arrays:
            fp = TopologyAssets.load(arrays["topology"].tobytes()).fingerprint
            if fp != self.topology.fingerprint:
                raise TopologyError("checkpoint topology differs from the dataset topology")
        for tag, net in (("G", self.G), ("D", self.D)):
            for name, p in net.named_parameters():
                key = f"{tag}/{name}"
                if key not in arrays:
                    raise MeshFormatError(f"checkpoint lacks parameter {key}")
                if arrays[key].shape != p.shape:
                    raise MeshFormatError(f"{key}: shape {arrays[key].shape} != {p.shape}")
                p.data = arrays[key].astype(p.dtype)
                p.adam_m = arrays[key + "@m"].astype(p.dtype)
                p.adam_v = arrays[key + "@v"].astype(p.dtype)
                p.step_count = int(arrays[key + "@t"][0])
        offset, scale = arrays["norm/offset"], float(arrays["norm/scale"][0])
        self.G.set_normalization(offset, scale)
        self.D.set_normalization(offset, scale)
        self.state = TrainState(int(arrays["meta/step"][0]), int(arrays["meta/epoch"][0]),
                                json.loads(_array_text(arrays["meta/running"])))

    def resume(self, path):
        """Load a checkpoint written by a run with the same config hash."""
        arrays, _, digest = read_container(path, CHECKPOINT_MAGIC)
        if digest != self.config.hash():
            raise ConfigError(f"config hash mismatch: checkpoint {digest}, run {self.config.hash()}")
        self.load_state(arrays)
        return self


def _text_array(text: str) -> np.ndarray:
    return np.frombuffer(text.encode(), dtype=np.uint8)


def _array_text(arr: np.ndarray) -> str:
    return np.asarray(arr, dtype=np.uint8).tobytes().decode()


@dataclass
class Checkpoint:
    """A loaded checkpoint: networks ready for inference plus provenance."""

    generator: Generator
    discriminator: Discriminator
    topology: TopologyAssets
    arch: ArchitectureConfig
    config_text: str
    config_hash: str
    step: int
    epoch: int


def load_checkpoint(path) -> Checkpoint:
    arrays, text, digest = read_container(path, CHECKPOINT_MAGIC)
    if "topology" not in arrays or "meta/arch" not in arrays:
        raise MeshFormatError(f"{path}: not a complete checkpoint")
    topo = TopologyAssets.load(arrays["topology"].tobytes())
    arch = ArchitectureConfig.from_dict(json.loads(_array_text(arrays["meta/arch"])))
    dtype = _dtype(int(arrays["meta/precision"][0]))
    with ad.default_dtype(dtype):
        G = Generator(arch, topo)
        D = Discriminator(arch, topo)
    for tag, net in (("G", G), ("D", D)):
        net.load_state_dict({n: arrays[f"{tag}/{n}"] for n, _ in net.named_parameters()})
    offset, scale = arrays["norm/offset"], float(arrays["norm/scale"][0])
    G.set_normalization(offset, scale)
    D.set_normalization(offset, scale)
    return Checkpoint(G, D, topo, arch, text, digest, int(arrays["meta/step"][0]),
                      int(arrays["meta/epoch"][0]))
