"""Trained-model artifact: posterior draws + configs in one directory.

Layout: draws.csv (canonical delimited text, chain column + one column per
parameter), submodels.json (predictor lists and prior config), schema.json
(predictor schema with scaling constants), diagnostics.json, and
manifest.json listing the content hashes of the three model files.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .data import Schema
from .model import PriorConfig, SubModelSpec, default_shrink_scale
from .sampler import PosteriorDraws

DRAWS_FILE = "draws.csv"
SUBMODELS_FILE = "submodels.json"
SCHEMA_FILE = "schema.json"
DIAGNOSTICS_FILE = "diagnostics.json"
MANIFEST_FILE = "manifest.json"


class BundleError(RuntimeError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _format(v: float) -> str:
    return repr(float(v))


def write_draws_csv(path, pd: PosteriorDraws) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["chain"] + list(pd.names))
        for i in range(pd.n_draws):
            writer.writerow([str(int(pd.chain_ids[i]))]
                            + [_format(v) for v in pd.draws[i]])


def read_draws_csv(path) -> PosteriorDraws:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[0] != "chain":
            raise BundleError(f"{path}: first column must be 'chain'")
        names = tuple(header[1:])
        chains = []
        rows = []
        for row in reader:
            chains.append(int(row[0]))
            rows.append([float(v) for v in row[1:]])
    draws = np.array(rows)
    chain_ids = np.array(chains, dtype=int)
    return PosteriorDraws(
        draws=draws,
        names=names,
        chain_ids=chain_ids,
        n_chains=len(set(chains)),
    )


@dataclass
class Bundle:
    """In-memory view of a model artifact directory."""

    draws: PosteriorDraws
    submodels: list
    prior: PriorConfig
    schema: Schema
    include_participant_effect: bool
    manifest: dict
    path: Path | None = None
    #: recalibration offsets on the logit-probability scale, per sub-model
    intercept_offsets: dict = None

    def submodel(self, key: str) -> SubModelSpec:
        for s in self.submodels:
            if s.key == key:
                return s
        raise BundleError(f"no sub-model {key!r} in bundle")


def _submodels_doc(submodels, prior: PriorConfig, include_participant_effect: bool,
                   intercept_offsets: dict | None = None) -> dict:
    return {
        "submodels": {s.key: list(s.predictor_names) for s in submodels},
        "shrink_scales": {s.key: s.shrink_scale for s in submodels},
        "prior": prior.to_dict(),
        "include_participant_effect": include_participant_effect,
        "intercept_offsets": intercept_offsets or {},
    }


def _submodels_from_doc(doc: dict):
    prior = PriorConfig.from_dict(doc["prior"])
    scales = doc.get("shrink_scales", {})
    submodels = []
    for key, names in doc["submodels"].items():
        group, _, outcome = key.partition(":")
        submodels.append(
            SubModelSpec(
                group=group,
                outcome=outcome,
                predictor_names=tuple(names),
                shrink_scale=scales.get(key, default_shrink_scale(group, outcome)),
            )
        )
    return submodels, prior, bool(doc.get("include_participant_effect", True))


def _sanitize(obj):
    if isinstance(obj, dict):
        return {k: _sanitize(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_sanitize(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_sanitize(doc), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_bundle(out_dir, draws: PosteriorDraws, submodels, prior: PriorConfig,
                schema: Schema, *, include_participant_effect: bool = True,
                command: str = "", seed: int | None = None,
                inputs: dict | None = None, provenance: dict | None = None,
                intercept_offsets: dict | None = None) -> Path:
    """Write the artifact directory and its manifest; returns the path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_draws_csv(out / DRAWS_FILE, draws)
    write_json(out / SUBMODELS_FILE,
               _submodels_doc(submodels, prior, include_participant_effect,
                              intercept_offsets))
    schema.save(out / SCHEMA_FILE)
    write_json(out / DIAGNOSTICS_FILE, draws.diagnostics)
    manifest = {
        "kind": "model-bundle",
        "version": __version__,
        "command": command,
        "seed": seed,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "inputs": inputs or {},
        "files": {
            name: sha256_file(out / name)
            for name in (DRAWS_FILE, SUBMODELS_FILE, SCHEMA_FILE)
        },
    }
    if provenance:
        manifest["provenance"] = provenance
    write_json(out / MANIFEST_FILE, manifest)
    return out


def load_bundle(path, verify: bool = True) -> Bundle:
    root = Path(path)
    manifest_path = root / MANIFEST_FILE
    if not manifest_path.exists():
        raise BundleError(f"{root}: not a model bundle (missing {MANIFEST_FILE})")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if verify:
        for name, digest in manifest.get("files", {}).items():
            actual = sha256_file(root / name)
            if actual != digest:
                raise BundleError(f"{root}/{name}: content hash mismatch")
    with open(root / SUBMODELS_FILE, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    submodels, prior, include_pe = _submodels_from_doc(doc)
    offsets = {k: float(v) for k, v in doc.get("intercept_offsets", {}).items()}
    schema = Schema.load(root / SCHEMA_FILE)
    draws = read_draws_csv(root / DRAWS_FILE)
    diag_path = root / DIAGNOSTICS_FILE
    if diag_path.exists():
        with open(diag_path, "r", encoding="utf-8") as fh:
            draws.diagnostics = json.load(fh)
    return Bundle(
        draws=draws,
        submodels=submodels,
        prior=prior,
        schema=schema,
        include_participant_effect=include_pe,
        manifest=manifest,
        path=root,
        intercept_offsets=offsets,
    )
