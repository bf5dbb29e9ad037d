import os

import numpy as np
import pytest

from facetune import autodiff as ad
from facetune.config import RunConfig
from facetune.data import SynthConfig, generate_dataset
from facetune.mesh import Mesh, build_topology

TINY_ARCH = dict(n_downsamplings=2, content_channels=[8, 8], style_channels=[8, 8],
                 disc_channels=[8, 8], decoder_channels=[8, 8], bottleneck_channels=8,
                 content_mlp=[16], style_mlp=[16], decoder_mlp=[16], mapping_hidden=[16],
                 content_dim=4, style_dim=2)


@pytest.fixture(autouse=True)
def _f64():
    with ad.default_dtype(np.float64):
        yield


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(SynthConfig(template=2, n_identities=4, n_expressions=3,
                                        samples_per_cell=2, seed=1))


def tiny_config(seed=0, **sections):
    d = {"seed": seed, "dataset": {"synth": {"template": 2, "n_identities": 4,
                                              "n_expressions": 3, "samples_per_cell": 2,
                                              "seed": 1}},
         "architecture": {"preset": "synth", **TINY_ARCH},
         "train": {"precision": 64, "batch_size": 4, "epochs": 1}}
    for k, v in sections.items():
        d.setdefault(k, {})
        if isinstance(v, dict):
            d[k].update(v)
        else:
            d[k] = v
    return RunConfig.from_dict(d)


@pytest.fixture(scope="session")
def tiny_topology(tiny_dataset):
    X, _, _ = tiny_dataset.subset("train")
    cfg = tiny_config()
    arch = cfg.arch(n_vertices=X.shape[1], n_styles=3)
    return build_topology(Mesh(X.mean(axis=0), tiny_dataset.faces), arch.n_downsamplings,
                          arch.factor, arch.spiral_length)


@pytest.fixture
def make_trainer(tiny_dataset, tiny_topology):
    from facetune.training import Trainer

    def make(**sections):
        cfg = tiny_config(**sections)
        X, _, S = tiny_dataset.subset("train")
        return Trainer(cfg, tiny_topology, X, S, 3, arch=cfg.arch(X.shape[1], 3))

    return make


def pytest_configure(config):
    os.environ.setdefault("FACETUNE_NUM_THREADS", "1")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, line = results[n]
        terminalreporter.write_line(f"criterion {n} {'PASS' if ok else 'FAIL'}  {line}")
