"""On-disk training sets: length-prefixed binary records plus a JSON manifest.

Record layout (little-endian)::

    u32 record length | u32 meta length | meta JSON | raw node latencies as f64

Graphs are not stored. They are rebuilt from each record's ``config_seed`` and
the generator ranges in the manifest.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import canonical_json
from .profiles import synthetic_system
from .samples import Sample
from .simulator import dataset_hash, generate_training_set
from .sysgraph import build_system_graph

FORMAT = "coinfer-samples/1"


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def encode_records(samples: Sequence[Sample]) -> bytes:
    out = bytearray()
    for s in samples:
        meta = canonical_json({"group": s.group, "config_seed": s.config_seed, "scheme": s.scheme,
                               "throughput": float(s.throughput)}).encode()
        raw = np.asarray(s.raw, dtype="<f8").tobytes()
        body = struct.pack("<I", len(meta)) + meta + raw
        out += struct.pack("<I", len(body)) + body
    return bytes(out)


def decode_records(buf: bytes) -> list[dict]:
    records, off = [], 0
    while off < len(buf):
        if off + 4 > len(buf):
            raise ValueError("truncated record length")
        (n,) = struct.unpack_from("<I", buf, off)
        body = buf[off + 4: off + 4 + n]
        if len(body) != n:
            raise ValueError("truncated record")
        (m,) = struct.unpack_from("<I", body)
        meta = json.loads(body[4:4 + m].decode())
        meta["raw"] = np.frombuffer(body[4 + m:], dtype="<f8").astype(float)
        records.append(meta)
        off += 4 + n
    return records


def write_dataset(samples: Sequence[Sample], path: str | Path, **generator) -> dict:
    """Write records and manifest; returns the manifest."""
    path = Path(path)
    blob = encode_records(samples)
    path.write_bytes(blob)
    manifest = {"format": FORMAT, "n_samples": len(samples), "sha256": dataset_hash(samples),
                "file_sha256": hashlib.sha256(blob).hexdigest(), "generator": generator}
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_dataset(path: str | Path) -> list[Sample]:
    path = Path(path)
    blob = path.read_bytes()
    manifest = json.loads(manifest_path(path).read_text())
    if manifest.get("format") != FORMAT:
        raise ValueError(f"unsupported dataset format {manifest.get('format')!r}")
    if hashlib.sha256(blob).hexdigest() != manifest["file_sha256"]:
        raise ValueError("dataset file does not match its manifest hash")
    gen = manifest.get("generator", {})
    n_devices = tuple(gen.get("n_devices", (1, 5)))
    n_layers = tuple(gen.get("n_layers", (2, 8)))
    graphs: dict[int, object] = {}
    samples = []
    for r in decode_records(blob):
        seed = r["config_seed"]
        if seed not in graphs:
            config, _ = synthetic_system(seed, n_devices, n_layers)
            graphs[seed] = build_system_graph(config)
        samples.append(Sample(graphs[seed], r["raw"], r["throughput"], r["group"], r["scheme"], seed))
    return samples


def generate_dataset(n_samples: int, seed: int, path: str | Path, schemes_per_config: int = 8,
                     n_devices: tuple[int, int] = (1, 5), n_layers: tuple[int, int] = (2, 8)) -> dict:
    samples = generate_training_set(n_samples, seed, schemes_per_config, n_devices, n_layers)
    return write_dataset(samples, path, seed=seed, n_samples=n_samples, schemes_per_config=schemes_per_config,
                         n_devices=list(n_devices), n_layers=list(n_layers))
