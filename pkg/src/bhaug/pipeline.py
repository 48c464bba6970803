"""End-to-end helpers: per-sample preprocessing, prototype training and
artifact assembly, on top of the container format."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .coefnet import SampleArtifacts
from .data import Container
from .geometry import biharmonic_for_cloud, normalize_cloud
from .prototypenet import PrototypeConfig, train_prototypenet

log = logging.getLogger(__name__)


def _prep_one(args):
    cloud, controls, k, mass, seed = args
    cloud = normalize_cloud(cloud)
    bc = biharmonic_for_cloud(cloud, controls, k, mass, seed)
    return SampleArtifacts.from_parts(cloud.id, bc, label=cloud.label)


def sample_seed(seed, index):
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def prepare(dataset, controls=32, k=8, mass="unit", seed=0, workers=1) -> dict:
    """Normalize, build graph + Laplacian, pick FPS controls and solve for W
    for every sample.  Returns {id: SampleArtifacts} without prototypes."""
    jobs = [(c, controls, k, mass, sample_seed(seed, i)) for i, c in enumerate(dataset)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as ex:
            arts = list(ex.map(_prep_one, jobs, chunksize=8))
    else:
        arts = [_prep_one(j) for j in jobs]
    return {a.id: a for a in arts}


def attach_prototypes(artifacts: dict, prototypes: dict) -> dict:
    for sid, protos in prototypes.items():
        art = artifacts[sid]
        art.M, art.F_mh = protos.M, protos.F_mh
    return artifacts


def learn_prototypes(dataset, artifacts: dict, cfg: PrototypeConfig | None = None, log_every=0):
    coords = {sid: a.bc for sid, a in artifacts.items()}
    clouds = [normalize_cloud(c) for c in dataset]
    params, protos, history = train_prototypenet(clouds, coords, cfg, log_every=log_every)
    attach_prototypes(artifacts, protos)
    return params, history


def write_artifacts(path, artifacts: dict):
    box = Container(path)
    entries = [box.write_payload(sid, art.arrays(), art.label) for sid, art in artifacts.items()]
    box.commit(entries, {"kind": "artifacts"})
    return box


def read_artifacts(path, ids=None) -> dict:
    box = Container(path)
    out = {}
    for sid in ids if ids is not None else box.ids():
        arrs = box.load(sid)
        out[sid] = SampleArtifacts.from_arrays(sid, arrs, box.entries[sid].label)
    return out
