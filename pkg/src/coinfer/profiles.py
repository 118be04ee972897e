"""Pre-collected subtask latencies, communication volumes, and preset PP splits."""
from __future__ import annotations

import bisect
import json
from collections import defaultdict
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .core import (BatchPolicy, DeviceProfile, ModelProfile, NetworkState, Strategy,
                   SystemConfig)

KB = 1000  # fixture volumes are decimal kilobytes


class LUTLookupError(KeyError):
    """Missing (device kind, model, layer range) key in a latency LUT."""

    def __str__(self):
        return str(self.args[0]) if self.args else "lookup error"


class NoInteriorSplitError(ValueError):
    pass


class SubtaskLatencyLUT:
    """Latency in ms keyed by (device kind, model id, layer range [i, j), batch size)."""

    def __init__(self, entries: Iterable[tuple[str, str, int, int, int, float]] = ()):
        self._table: dict[tuple[str, str, int, int], list[tuple[int, float]]] = defaultdict(list)
        self._models: set[str] = set()
        for kind, model, i, j, b, ms in entries:
            self.add(kind, model, i, j, b, ms)

    def add(self, kind: str, model: str, i: int, j: int, batch: int, ms: float) -> None:
        if not 0 <= i < j:
            raise ValueError(f"invalid layer range [{i}, {j})")
        if batch < 1 or not ms > 0:
            raise ValueError("batch must be >= 1 and latency positive")
        row = self._table[(kind, model, int(i), int(j))]
        bs = [b for b, _ in row]
        pos = bisect.bisect_left(bs, batch)
        if pos < len(row) and row[pos][0] == batch:
            row[pos] = (int(batch), float(ms))
        else:
            row.insert(pos, (int(batch), float(ms)))
        self._models.add(model)

    def __len__(self) -> int:
        return sum(len(v) for v in self._table.values())

    def __iter__(self):
        for (kind, model, i, j), row in sorted(self._table.items()):
            for b, ms in row:
                yield kind, model, i, j, b, ms

    def has_model(self, model_id: str) -> bool:
        return model_id in self._models

    def has(self, kind: str, model_id: str, i: int, j: int) -> bool:
        return (kind, model_id, i, j) in self._table

    def kinds(self) -> set[str]:
        return {k for k, _, _, _ in self._table}

    def batch_sizes(self, kind: str, model_id: str, i: int, j: int) -> list[int]:
        return [b for b, _ in self._table.get((kind, model_id, i, j), [])]

    def to_json(self) -> str:
        return json.dumps([{"kind": k, "model": m, "i": i, "j": j, "batch": b, "ms": ms}
                           for k, m, i, j, b, ms in self], indent=1)

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "SubtaskLatencyLUT":
        return cls((r["kind"], r["model"], int(r["i"]), int(r["j"]), int(r["batch"]), float(r["ms"]))
                   for r in records)

    @classmethod
    def load(cls, path: str | Path) -> "SubtaskLatencyLUT":
        return cls.from_records(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    def merged(self, other: "SubtaskLatencyLUT") -> "SubtaskLatencyLUT":
        return SubtaskLatencyLUT(list(self) + list(other))


def lookup_latency(lut: SubtaskLatencyLUT, device_kind: str, model_id: str,
                   layer_range: tuple[int, int], batch: int = 1) -> float:
    """Latency of running ``layer_range`` of ``model_id`` on ``device_kind`` at ``batch``.

    Exact hits are returned as stored. Between two stored batch sizes the value
    is interpolated linearly; outside the stored range the nearest entry is
    scaled proportionally to the batch size. An empty range costs nothing.
    """
    i, j = layer_range
    if i == j:
        return 0.0
    row = lut._table.get((device_kind, model_id, int(i), int(j)))
    if not row:
        raise LUTLookupError(f"no LUT entry for kind={device_kind!r} model={model_id!r} range=[{i},{j})")
    bs = [b for b, _ in row]
    pos = bisect.bisect_left(bs, batch)
    if pos < len(row) and row[pos][0] == batch:
        return row[pos][1]
    if pos == 0:
        b0, ms0 = row[0]
        return ms0 * batch / b0
    if pos == len(row):
        b0, ms0 = row[-1]
        return ms0 * batch / b0
    (b0, ms0), (b1, ms1) = row[pos - 1], row[pos]
    return ms0 + (ms1 - ms0) * (batch - b0) / (b1 - b0)


def comm_volume(model: ModelProfile, strategy: Strategy) -> float:
    """Forward bytes shipped device→server; the result-return volume is not included."""
    if strategy.is_dp:
        return model.boundary_volumes[0]
    if not strategy.valid_for(model):
        raise ValueError(f"{strategy} out of range for {model.model_id} ({model.n_layers} layers)")
    return model.boundary_volumes[strategy.split]


def preset_pp_comm(model: ModelProfile) -> int:
    """Interior split with the smallest intermediate volume (ties → smaller split)."""
    if model.n_layers < 2:
        raise NoInteriorSplitError(f"model {model.model_id!r} has no interior split (n_layers={model.n_layers})")
    interior = range(1, model.n_layers)
    return min(interior, key=lambda s: (model.boundary_volumes[s], s))


def preset_pp_comp(model: ModelProfile, device_kind: str, server_kind: str,
                   lut: SubtaskLatencyLUT) -> int:
    """Interior split minimising device-stage + server-stage compute at batch 1.

    Ties go to the smaller transferred volume, then the smaller split.
    """
    if model.n_layers < 2:
        raise NoInteriorSplitError(f"model {model.model_id!r} has no interior split (n_layers={model.n_layers})")
    n = model.n_layers

    def cost(s: int):
        total = (lookup_latency(lut, device_kind, model.model_id, (0, s), 1)
                 + lookup_latency(lut, server_kind, model.model_id, (s, n), 1))
        return total, model.boundary_volumes[s], s

    return min(range(1, n), key=cost)


def candidate_strategies(model: ModelProfile, device_kind: str, server_kind: str,
                         lut: SubtaskLatencyLUT) -> list[Strategy]:
    """The coarse option set {DP, PP_comp, PP_comm}, deduplicated, in that order."""
    opts = [Strategy.dp()]
    if model.n_layers >= 2:
        for s in (preset_pp_comp(model, device_kind, server_kind, lut), preset_pp_comm(model)):
            st = Strategy.pp(s)
            if st not in opts:
                opts.append(st)
    else:
        opts.append(Strategy.pp(0))
    return opts


def all_strategies(model: ModelProfile) -> list[Strategy]:
    return [Strategy.dp()] + [Strategy.pp(s) for s in range(model.n_layers + 1)]


# --------------------------------------------------------------------------- fixtures

# Communication volumes for point-cloud classification (1024 points, 40 classes).
GCODE_MODELNET40 = ModelProfile("gcode-mn40", 2, (12.2 * KB, 332.0 * KB, 0.16 * KB), "modelnet40")
DGCNN_MODELNET40 = ModelProfile("dgcnn-mn40", 2, (12.2 * KB, 24.2 * KB, 0.16 * KB), "modelnet40")
MIXED_MODELNET40 = ModelProfile("mixed-mn40", 3, (12.2 * KB, 332.0 * KB, 24.2 * KB, 0.16 * KB), "modelnet40")


def _fixture_text(name: str) -> str:
    return resources.files("coinfer.fixtures").joinpath(name).read_text()


def load_fixture_lut(name: str = "adaptive_lut.json") -> SubtaskLatencyLUT:
    return SubtaskLatencyLUT.from_records(json.loads(_fixture_text(name)))


def load_fixture_config(name: str = "adaptive_config.json") -> SystemConfig:
    return SystemConfig.from_dict(json.loads(_fixture_text(name)))


def load_scenario(path: str | Path, lut_path: str | Path | None = None) -> tuple[SystemConfig, SubtaskLatencyLUT]:
    """System config plus LUT from a JSON file.

    The LUT comes from ``lut_path`` if given, else from the config's ``"lut"``
    key: either inline records or a path relative to the config file.
    ``fixture:NAME`` loads a bundled fixture config.
    """
    text = str(path)
    if text.startswith("fixture:"):
        name = text.split(":", 1)[1]
        data = json.loads(_fixture_text(name if name.endswith(".json") else name + "_config.json"))
        base = None
    else:
        data = json.loads(Path(path).read_text())
        base = Path(path).parent
    config = SystemConfig.from_dict(data)
    if lut_path is not None:
        return config, SubtaskLatencyLUT.load(lut_path)
    ref = data.get("lut")
    if ref is None:
        raise ValueError(f"{path}: no LUT given and none referenced by the config")
    if isinstance(ref, list):
        return config, SubtaskLatencyLUT.from_records(ref)
    if base is None:
        return config, load_fixture_lut(ref)
    return config, SubtaskLatencyLUT.load(base / ref)


# --------------------------------------------------------------------------- synthetic systems

# Relative compute cost per hardware kind (1.0 = reference core); devices are
# slower than the server, GPUs faster than CPUs.
KIND_SPEED = {
    "pi3b": 4.0, "pi4b": 2.5, "nano": 1.6, "tx2-cpu": 1.9, "tx2-gpu": 0.9,
    "i7-cpu": 0.35, "gtx1060": 0.12,
}
DEVICE_KINDS = ("pi3b", "pi4b", "nano", "tx2-cpu", "tx2-gpu")
SERVER_KINDS = ("i7-cpu", "gtx1060")


def synthetic_model(rng: np.random.Generator, model_id: str, n_layers: int) -> ModelProfile:
    raw = float(rng.uniform(2, 40)) * KB
    vols = [raw]
    for _ in range(n_layers - 1):
        vols.append(raw * float(np.exp(rng.uniform(np.log(0.3), np.log(30.0)))))
    vols.append(float(rng.uniform(0.05, 0.5)) * KB)
    return ModelProfile(model_id, n_layers, tuple(vols), "synthetic")


def synthetic_lut(rng: np.random.Generator, models: Iterable[ModelProfile],
                  device_kinds: Iterable[str], server_kind: str,
                  max_batch: int = 8) -> SubtaskLatencyLUT:
    """Random but internally consistent LUT.

    Range latency is the sum of per-layer costs scaled by the hardware kind,
    a per-(model, kind) jitter and a per-(kind, layer) sensitivity. Server batches cost ``c1 * (1 + a*(b-1))`` with a
    sublinear slope ``a`` drawn per model.
    """
    lut = SubtaskLatencyLUT()
    device_kinds = sorted(set(device_kinds))
    for model in models:
        n = model.n_layers
        scale = float(np.exp(rng.uniform(np.log(1.0), np.log(12.0))))
        base = scale * np.exp(rng.uniform(np.log(0.5), np.log(2.0), size=n))
        slope = float(rng.uniform(0.25, 0.7))
        for kind in [*device_kinds, server_kind]:
            factor = KIND_SPEED.get(kind, 1.0) * float(np.exp(rng.uniform(np.log(0.8), np.log(1.25))))
            sens = np.exp(rng.uniform(np.log(0.8), np.log(1.25), size=n))
            layer_ms = base * factor * sens
            for i in range(n):
                for j in range(i + 1, n + 1):
                    c1 = float(layer_ms[i:j].sum()) + 0.2
                    lut.add(kind, model.model_id, i, j, 1, c1)
                    if kind == server_kind:
                        for b in range(2, max_batch + 1):
                            lut.add(kind, model.model_id, i, j, b, c1 * (1 + slope * (b - 1)))
    return lut


def synthetic_system(seed: int, n_devices: tuple[int, int] = (1, 5), n_layers: tuple[int, int] = (2, 8),
                     bandwidth: tuple[float, float] = (1.0, 100.0), n_idle: int = 0,
                     worker_count: int = 2) -> tuple[SystemConfig, SubtaskLatencyLUT]:
    """Seeded random system: devices, models, bandwidth and a consistent LUT."""
    rng = np.random.default_rng(seed)
    k = int(rng.integers(n_devices[0], n_devices[1] + 1))
    server_kind = str(rng.choice(SERVER_KINDS))
    n_models = int(rng.integers(1, k + 1))
    models = [synthetic_model(rng, f"m{seed}-{i}", int(rng.integers(n_layers[0], n_layers[1] + 1)))
              for i in range(n_models)]
    devices = [DeviceProfile(f"d{i}", str(rng.choice(DEVICE_KINDS)), "client") for i in range(k)]
    devices += [DeviceProfile(f"idle{i}", str(rng.choice(DEVICE_KINDS)), "idle") for i in range(n_idle)]
    assign = {d.device_id: models[int(rng.integers(n_models))] for d in devices}
    bw = float(np.exp(rng.uniform(np.log(bandwidth[0]), np.log(bandwidth[1]))))
    overhead = float(rng.uniform(0.0, 2.0))
    devices.append(DeviceProfile("server", server_kind, "server"))
    used = {assign[d.device_id].model_id: assign[d.device_id] for d in devices if d.role != "server"}
    lut = synthetic_lut(rng, used.values(), [d.kind for d in devices if d.role != "server"], server_kind)
    config = SystemConfig(tuple(devices), assign, NetworkState(bw, overhead),
                          BatchPolicy(), worker_count)
    return config, lut
