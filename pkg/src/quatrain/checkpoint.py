"""Single-file checkpoints: a JSON manifest followed by raw fp64 arrays.

Layout: 8-byte magic, little-endian uint64 manifest length, UTF-8 JSON
manifest, then the concatenated little-endian float64 parameter blobs.
The manifest records name/shape/offset per parameter plus a full echo of
the model configuration, vocabulary, tf-idf stats and training config, so
a checkpoint is self-contained for generation. Round-trips are bit-exact.
"""

from __future__ import annotations

import json

import numpy as np

from .autodiff import Tensor
from .corpus import TfIdfTable, Vocabulary
from .model import Model, ModelConfig, ModelParams

MAGIC = b"QTRCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: Model, vocab: Vocabulary,
                    tfidf: TfIdfTable, extra_config: dict | None = None):
    params = model.params
    entries = []
    offset = 0
    blobs = []
    for name in params.names():
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        blob = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(blob)})
        offset += len(blob)
        blobs.append(blob)
    manifest = {
        "format_version": FORMAT_VERSION,
        "model_config": model.cfg.to_dict(),
        "vocab": json.loads(vocab.to_json()),
        "tfidf": tfidf.to_manifest(),
        "config": extra_config or {},
        "params": entries,
    }
    payload = json.dumps(manifest, ensure_ascii=False, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(payload).to_bytes(8, "little"))
        fh.write(payload)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Returns (model, vocab, tfidf, manifest)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise CheckpointError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (length,) = (int.from_bytes(fh.read(8), "little"),)
        manifest = json.loads(fh.read(length).decode("utf-8"))
        if manifest.get("format_version") != FORMAT_VERSION:
            raise CheckpointError(
                f"{path}: unsupported format version {manifest.get('format_version')}")
        data = fh.read()
    cfg = ModelConfig.from_dict(manifest["model_config"])
    tensors = {}
    for entry in manifest["params"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(data[start:start + nbytes], dtype="<f8")
        tensors[entry["name"]] = Tensor(arr.reshape(entry["shape"]).copy())
    model = Model(cfg, ModelParams(tensors))
    vocab = Vocabulary(manifest["vocab"])
    tfidf = TfIdfTable.from_manifest(manifest["tfidf"])
    return model, vocab, tfidf, manifest
