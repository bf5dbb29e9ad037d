"""``facetune`` command-line entry point.

Exit codes: 0 success, 2 validation error, 3 numeric failure, 4 I/O error.
Failures print one machine-readable ``error: <kind>: <message>`` line on
stderr. ``FACETUNE_NUM_THREADS`` caps BLAS threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
THREADS_ENV = "FACETUNE_NUM_THREADS"


def _cap_threads():
    n = os.environ.get(THREADS_ENV)
    if n:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, n)


_cap_threads()

import numpy as np  # noqa: E402

from .config import load_config  # noqa: E402
from .exceptions import (ConfigError, FaceTuneError, MeshFormatError, NumericalError,  # noqa: E402
                         ShapeError, TopologyError)

log = logging.getLogger("facetune")


def _add_config_args(p):
    p.add_argument("--config", help="YAML run config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. train.epochs=5 (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="facetune", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic dataset, manifest and ground truth")
    _add_config_args(p)
    p.add_argument("--out", help="output directory (default: <output_dir>/data)")

    p = sub.add_parser("train", help="train and write checkpoints + telemetry")
    _add_config_args(p)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--max-seconds", type=float)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest's test split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--metrics", default="rec,iddecomp,neutral,transfer")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--draws", type=int)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="directory for report.csv and summary.yaml")

    p = sub.add_parser("transfer", help="render --content in the style of --style")
    p.add_argument("checkpoint")
    p.add_argument("--content", required=True)
    p.add_argument("--style", help="style exemplar mesh")
    p.add_argument("--neutralize", metavar="NEUTRAL_MESH", help="neutral-class style exemplar")
    p.add_argument("--out", required=True)

    for name in ("interpolate", "extrapolate"):
        p = sub.add_parser(name, help=f"{name} between the codes of two meshes")
        p.add_argument("checkpoint")
        p.add_argument("--a", required=True)
        p.add_argument("--b", required=True)
        p.add_argument("--space", choices=("content", "style"), default="style")
        p.add_argument("--step", type=float, default=0.25 if name == "interpolate" else 0.5)
        p.add_argument("--count", type=int, default=4)
        p.add_argument("--outdir", required=True)

    p = sub.add_parser("inspect", help="print a checkpoint's config, parameter counts and shapes")
    p.add_argument("checkpoint", nargs="?")
    p.add_argument("--preset", help="inspect a preset instead of a checkpoint")
    return ap


# commands --------------------------------------------------------------------------

def _dataset(cfg):
    """``(vertices, content, style, faces, style_labels, n_styles)`` of the training split."""
    from .data import SynthConfig, generate_dataset
    from .data.manifest import load_manifest

    kind, spec = next(iter(cfg.dataset.items()))
    if kind == "synth":
        ds = generate_dataset(SynthConfig(**(spec or {})))
        X, C, S = ds.subset("train")
        return X, C, S, ds.faces, ds.style_labels
    man = load_manifest(spec)
    X, C, S, faces = man.arrays("train")
    return X, C, S, faces, man.style_labels


def cmd_gen_data(args) -> int:
    from .data import SynthConfig, generate_dataset
    from .data.manifest import save_synth_dataset

    cfg = load_config(args.config, args.overrides)
    kind, spec = next(iter(cfg.dataset.items()))
    if kind != "synth":
        raise ConfigError("gen-data needs a 'synth' dataset section")
    out = args.out or os.path.join(cfg.output_dir, "data")
    ds = generate_dataset(SynthConfig(**(spec or {})))
    man = save_synth_dataset(ds, out, digest=cfg.hash())
    with open(os.path.join(out, "config_hash.txt"), "w") as fh:
        fh.write(cfg.hash() + "\n")
    print(json.dumps({"out": out, "meshes": len(man), "fingerprint": man.fingerprint,
                      "config_hash": cfg.hash(),
                      "mean_expression_displacement": ds.ground_truth.mean_expression_displacement()}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .mesh import Mesh, build_topology
    from .training import Trainer

    cfg = load_config(args.config, args.overrides)
    X, _, S, faces, style_labels = _dataset(cfg)
    arch = cfg.arch(n_vertices=X.shape[1], n_styles=len(style_labels))
    topo = build_topology(Mesh(X.mean(axis=0), faces), arch.n_downsamplings, arch.factor,
                          arch.spiral_length, arch.dilation)
    tr = Trainer(cfg, topo, X, S, len(style_labels), arch=arch)
    if args.resume:
        tr.resume(args.resume)
    os.makedirs(cfg.output_dir, exist_ok=True)
    with open(os.path.join(cfg.output_dir, "config.yaml"), "w") as fh:
        fh.write(f"# config hash: {cfg.hash()}\n" + cfg.dumps())
    st = tr.train(cfg.train.epochs, cfg.output_dir, max_seconds=args.max_seconds)
    ckpt = os.path.join(cfg.output_dir, "latest.ftgn")
    if not os.path.exists(ckpt):  # zero epochs: only the initial checkpoint exists
        ckpt = os.path.join(cfg.output_dir, "ckpt_e0000.ftgn")
    print(json.dumps({"step": st.step, "epoch": st.epoch, "config_hash": cfg.hash(),
                      "checkpoint": ckpt}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .data.manifest import load_manifest
    from .eval import EvalSet, evaluate
    from .training import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    man = load_manifest(args.manifest)
    if man.fingerprint != ck.topology.fingerprint:
        raise TopologyError(f"manifest fingerprint {man.fingerprint} differs from the "
                            f"checkpoint's {ck.topology.fingerprint}")
    X, C, S, _ = man.arrays(args.split)
    ev = EvalSet(X, C, S, man.content_labels, man.style_labels, man.record_ids(args.split),
                 man.neutral_index)
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    rep = evaluate(ev, ck.generator, metrics, args.draws, args.seed,
                   {"config_hash": ck.config_hash, "checkpoint_step": ck.step,
                    "checkpoint": os.path.basename(args.checkpoint)})
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        rep.to_csv(os.path.join(args.out, "report.csv"))
        with open(os.path.join(args.out, "summary.yaml"), "w") as fh:
            fh.write(rep.summary())
    print(rep.summary(), end="")
    return EXIT_OK


def _mesh(path, topo):
    from .mesh import load_mesh, topology_fingerprint

    m = load_mesh(path)
    if topology_fingerprint(m.faces) != topo.fingerprint:
        raise TopologyError(f"{path}: topology differs from the checkpoint's")
    return m


def cmd_transfer(args) -> int:
    from .eval import translate
    from .mesh import Mesh, save_mesh
    from .training import load_checkpoint

    if bool(args.style) == bool(args.neutralize):
        raise ConfigError("give exactly one of --style or --neutralize")
    ck = load_checkpoint(args.checkpoint)
    content = _mesh(args.content, ck.topology)
    style = _mesh(args.style or args.neutralize, ck.topology)
    out = translate(ck.generator, content.vertices[None], style.vertices[None])[0]
    save_mesh(Mesh(out, content.faces), args.out)
    print(json.dumps({"out": args.out, "config_hash": ck.config_hash}))
    return EXIT_OK


def cmd_latent(args) -> int:
    from .eval import extrapolate_latent, interpolate_latent
    from .mesh import Mesh, save_mesh
    from .training import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    a, b = _mesh(args.a, ck.topology), _mesh(args.b, ck.topology)
    fn = interpolate_latent if args.command == "interpolate" else extrapolate_latent
    meshes = fn(ck.generator, a, b, args.space, args.step, args.count)
    os.makedirs(args.outdir, exist_ok=True)
    start = 0 if args.command == "interpolate" else 1
    paths = []
    for i, v in enumerate(meshes, start=start):
        p = os.path.join(args.outdir, f"{args.command}_{args.space}_{i:02d}.obj")
        save_mesh(Mesh(v, a.faces), p)
        paths.append(p)
    with open(os.path.join(args.outdir, "config_hash.txt"), "w") as fh:
        fh.write(ck.config_hash + "\n")
    print(json.dumps({"meshes": paths, "config_hash": ck.config_hash}))
    return EXIT_OK


def cmd_inspect(args) -> int:
    from .model import parameter_counts, preset

    if args.preset:
        arch = preset(args.preset)
        counts = parameter_counts(arch)
        print(json.dumps({"preset": args.preset, "architecture": arch.to_dict(),
                          "parameters": counts}, indent=2))
        return EXIT_OK
    if not args.checkpoint:
        raise ConfigError("inspect needs a checkpoint or --preset")
    from .training import load_checkpoint

    ck = load_checkpoint(args.checkpoint)
    shapes = {f"G.{n}": list(p.shape) for n, p in ck.generator.named_parameters()}
    shapes.update({f"D.{n}": list(p.shape) for n, p in ck.discriminator.named_parameters()})
    print(json.dumps({"config_hash": ck.config_hash, "step": ck.step, "epoch": ck.epoch,
                      "topology": {"fingerprint": ck.topology.fingerprint,
                                   "level_sizes": ck.topology.level_sizes},
                      "parameters": parameter_counts(ck.arch), "shapes": shapes,
                      "config": ck.config_text}, indent=2))
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval,
            "transfer": cmd_transfer, "interpolate": cmd_latent, "extrapolate": cmd_latent,
            "inspect": cmd_inspect}


def _fail(code: int, kind: str, exc) -> int:
    print(f"error: {kind}: {exc}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    np.seterr(over="ignore", under="ignore")
    try:
        return COMMANDS[args.command](args)
    except NumericalError as exc:
        return _fail(EXIT_NUMERIC, "numeric", exc)
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        return _fail(EXIT_IO, "io", exc)
    except MeshFormatError as exc:
        return _fail(EXIT_IO, "format", exc)
    except (ConfigError, TopologyError, ShapeError) as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except FaceTuneError as exc:
        return _fail(EXIT_VALIDATION, "validation", exc)
    except OSError as exc:
        return _fail(EXIT_IO, "io", exc)


if __name__ == "__main__":
    sys.exit(main())
