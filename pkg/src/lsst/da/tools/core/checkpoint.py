"""Checkpoint files.

A checkpoint is one JSON document::

    {"manifest": [{"name": ..., "shape": [...]}, ...],
     "data": {name: [flat row-major float64 values], ...},
     "meta": {...}}

Parameter groups (e.g. "actor", "critic") are stored with names of the form
"group/param"; the manifest order is the ParamStore insertion order.
Floats are written with their shortest round-trip representation, so
reading a checkpoint back gives bit-identical values.
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np
from lsst.utils.logging import getLogger

from .diffmath import ParamStore
from .utils import ContractError, DimensionError, NumericError, safe_makedirs

_LOG = getLogger(__name__)

GROUP_SEP = "/"


def checkpoint_to_dict(stores: dict[str, ParamStore], meta: dict[str, Any]) -> dict[str, Any]:
    """Build the JSON-ready checkpoint document"""
    manifest = []
    data = {}
    for group, store in stores.items():
        for entry in store.manifest():
            full_name = f"{group}{GROUP_SEP}{entry['name']}"
            values = store[entry["name"]]
            if not np.all(np.isfinite(values)):
                raise NumericError(f"Refusing to write non-finite parameter {full_name}")
            manifest.append(dict(name=full_name, shape=entry["shape"]))
            data[full_name] = [float(val) for val in values.reshape(-1)]
    return dict(manifest=manifest, data=data, meta=meta)


def checkpoint_from_dict(doc: dict[str, Any]) -> tuple[dict[str, ParamStore], dict[str, Any]]:
    """Inverse of `checkpoint_to_dict`"""
    for key in ("manifest", "data"):
        if key not in doc:
            raise ContractError(f"Checkpoint is missing the '{key}' section")
    stores: dict[str, ParamStore] = {}
    for entry in doc["manifest"]:
        full_name = entry["name"]
        group, _, name = full_name.partition(GROUP_SEP)
        shape = tuple(int(dim) for dim in entry["shape"])
        flat = np.asarray(doc["data"][full_name], dtype=np.float64)
        if flat.size != int(np.prod(shape)):
            raise DimensionError(f"Checkpoint entry {full_name}: {flat.size} values for shape {shape}")
        stores.setdefault(group, ParamStore()).add(name, flat.reshape(shape))
    return stores, doc.get("meta", {})


def write_checkpoint(path: str, stores: dict[str, ParamStore], meta: dict[str, Any]) -> None:
    """Write parameter groups and metadata to a JSON checkpoint"""
    dirname = os.path.dirname(path)
    if dirname:
        safe_makedirs(dirname)
    doc = checkpoint_to_dict(stores, meta)
    with open(path, "wt", encoding="utf-8") as fout:
        json.dump(doc, fout)
        fout.write("\n")
    _LOG.debug("Wrote checkpoint %s", path)


def read_checkpoint(path: str) -> tuple[dict[str, ParamStore], dict[str, Any]]:
    """Read a checkpoint written by `write_checkpoint`"""
    if not os.path.exists(path):
        raise ContractError(f"No checkpoint at {path}")
    with open(path, "rt", encoding="utf-8") as fin:
        doc = json.load(fin)
    return checkpoint_from_dict(doc)
