"""Model checkpoints: a JSON manifest plus one UNGE blob per parameter."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .corpus import EmbeddingMatrix, load_embeddings, save_embeddings
from .numerics import Module

MANIFEST = "manifest.json"


def save_checkpoint(directory: str | Path, module: Module, meta: dict) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for i, (name, p) in enumerate(module.named_parameters()):
        fname = f"p{i:03d}.unge"
        rows = p.data.reshape(p.shape[0], -1) if p.ndim >= 2 else p.data.reshape(1, -1)
        save_embeddings(directory / fname, EmbeddingMatrix(rows))
        shapes[name] = {"file": fname, "shape": list(p.shape)}
    manifest = {"meta": meta, "parameters": shapes}
    (directory / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")


def read_manifest(directory: str | Path) -> dict:
    return json.loads((Path(directory) / MANIFEST).read_text(encoding="utf-8"))


def load_state(directory: str | Path) -> dict[str, np.ndarray]:
    directory = Path(directory)
    manifest = read_manifest(directory)
    state = {}
    for name, entry in manifest["parameters"].items():
        rows = load_embeddings(directory / entry["file"]).rows
        state[name] = rows.reshape(entry["shape"])
    return state
