"""Domain types shared across the toolkit.

Everything here is a frozen dataclass with a canonical JSON form
(``to_dict``/``from_dict``). Constructors are deliberately lenient so that
malformed configs can be built and then diagnosed by :func:`validate_config`.
"""
from __future__ import annotations

import bisect
import json
from dataclasses import dataclass, field, replace
from typing import Any, Iterable, Iterator, Literal, Mapping, Sequence

Role = Literal["client", "idle", "server"]
ROLES = ("client", "idle", "server")

BITS_PER_BYTE = 8
BITS_PER_MEGABIT = 1_000_000


class ConfigError(ValueError):
    """Raised when a config violates one or more invariants."""

    def __init__(self, errors: Sequence[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class DeviceProfile:
    device_id: str
    kind: str
    role: Role = "client"

    def to_dict(self) -> dict:
        return {"device_id": self.device_id, "kind": self.kind, "role": self.role}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "DeviceProfile":
        return cls(str(d["device_id"]), str(d["kind"]), d.get("role", "client"))


@dataclass(frozen=True)
class ModelProfile:
    """A deployable model: layer count plus the byte volume at every layer boundary.

    ``boundary_volumes[0]`` is the raw input, ``boundary_volumes[n_layers]`` the
    final result, everything in between an intermediate feature map.
    """

    model_id: str
    n_layers: int
    boundary_volumes: tuple[float, ...]
    task: str = ""

    def __post_init__(self):
        object.__setattr__(self, "boundary_volumes", tuple(float(v) for v in self.boundary_volumes))

    @property
    def input_volume(self) -> float:
        return self.boundary_volumes[0]

    @property
    def result_volume(self) -> float:
        return self.boundary_volumes[-1]

    def errors(self) -> list[str]:
        errs = []
        if self.n_layers < 1:
            errs.append(f"model {self.model_id!r}: n_layers must be positive")
        if len(self.boundary_volumes) != self.n_layers + 1:
            errs.append(
                f"model {self.model_id!r}: boundary_volumes length {len(self.boundary_volumes)} "
                f"!= n_layers + 1 ({self.n_layers + 1})"
            )
        if any(v <= 0 for v in self.boundary_volumes):
            errs.append(f"model {self.model_id!r}: all boundary volumes must be positive")
        return errs

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "n_layers": self.n_layers,
            "boundary_volumes": list(self.boundary_volumes),
            "task": self.task,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ModelProfile":
        return cls(str(d["model_id"]), int(d["n_layers"]), tuple(d["boundary_volumes"]), str(d.get("task", "")))


@dataclass(frozen=True, order=True)
class Strategy:
    """Either data parallelism or a pipeline split.

    ``PP(s)`` runs layers ``[0, s)`` on the device and ``[s, n)`` on the server,
    so ``PP(n)`` is device-only and ``PP(0)`` is edge-only.
    """

    mode: Literal["dp", "pp"]
    split: int | None = None

    @classmethod
    def dp(cls) -> "Strategy":
        return cls("dp", None)

    @classmethod
    def pp(cls, split: int) -> "Strategy":
        if int(split) < 0:
            raise ValueError(f"pipeline split must be non-negative, got {split}")
        return cls("pp", int(split))

    @property
    def is_dp(self) -> bool:
        return self.mode == "dp"

    def __str__(self) -> str:
        return "dp" if self.is_dp else f"pp:{self.split}"

    @classmethod
    def parse(cls, text: str) -> "Strategy":
        text = text.strip().lower()
        if text == "dp":
            return cls.dp()
        if text.startswith("pp:"):
            return cls.pp(int(text[3:]))
        raise ValueError(f"cannot parse strategy {text!r}")

    def valid_for(self, model: ModelProfile) -> bool:
        return self.is_dp or (self.split is not None and 0 <= self.split <= model.n_layers)

    def device_range(self, model: ModelProfile) -> tuple[int, int]:
        """Layer range executed on the device itself (full model for DP)."""
        return (0, model.n_layers) if self.is_dp else (0, self.split)

    def server_range(self, model: ModelProfile) -> tuple[int, int]:
        """Layer range executed on the server (full model for DP)."""
        return (0, model.n_layers) if self.is_dp else (self.split, model.n_layers)


@dataclass(frozen=True)
class Scheme:
    """Per-device strategy assignment, optionally with idle helper devices for DP dispatch."""

    assignment: tuple[tuple[str, Strategy], ...]
    helpers: tuple[str, ...] = ()

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Strategy] | Iterable[tuple[str, Strategy]],
                     helpers: Iterable[str] = ()) -> "Scheme":
        items = mapping.items() if isinstance(mapping, Mapping) else mapping
        return cls(tuple((str(k), v) for k, v in items), tuple(helpers))

    @classmethod
    def uniform(cls, device_ids: Iterable[str], strategy: Strategy) -> "Scheme":
        return cls(tuple((d, strategy) for d in device_ids))

    def __getitem__(self, device_id: str) -> Strategy:
        for d, s in self.assignment:
            if d == device_id:
                return s
        raise KeyError(device_id)

    def __iter__(self) -> Iterator[tuple[str, Strategy]]:
        return iter(self.assignment)

    def __len__(self) -> int:
        return len(self.assignment)

    @property
    def device_ids(self) -> tuple[str, ...]:
        return tuple(d for d, _ in self.assignment)

    def as_dict(self) -> dict[str, Strategy]:
        return dict(self.assignment)

    def with_strategy(self, device_id: str, strategy: Strategy) -> "Scheme":
        return replace(self, assignment=tuple((d, strategy if d == device_id else s) for d, s in self.assignment))

    def with_helpers(self, helpers: Iterable[str]) -> "Scheme":
        return replace(self, helpers=tuple(helpers))

    def __str__(self) -> str:
        text = ",".join(f"{d}={s}" for d, s in self.assignment)
        if self.helpers:
            text += "+" + ",".join(self.helpers)
        return text

    @classmethod
    def parse(cls, text: str) -> "Scheme":
        body, _, helpers = text.partition("+")
        pairs = []
        for item in filter(None, body.split(",")):
            d, _, s = item.partition("=")
            pairs.append((d, Strategy.parse(s)))
        return cls(tuple(pairs), tuple(filter(None, helpers.split(","))))

    def to_dict(self) -> dict:
        return {"assignment": {d: str(s) for d, s in self.assignment}, "helpers": list(self.helpers)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Scheme":
        return cls.from_mapping({k: Strategy.parse(v) for k, v in d["assignment"].items()}, d.get("helpers", ()))


@dataclass(frozen=True)
class NetworkState:
    """Per-client-link rate in decimal megabits per second plus a fixed per-transfer cost.

    ``trace`` optionally makes the rate piecewise constant: a sequence of
    ``(start_seconds, mbps)`` breakpoints. Before the first breakpoint the
    base ``bandwidth_mbps`` applies.
    """

    bandwidth_mbps: float
    per_message_overhead_ms: float = 0.0
    trace: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "trace", tuple(sorted((float(t), float(r)) for t, r in self.trace)))

    def _segments(self) -> list[tuple[float, float]]:
        # (start_ms, mbps); first segment always starts at -inf
        segs = [(float("-inf"), self.bandwidth_mbps)]
        for t, r in self.trace:
            if t <= 0 and len(segs) == 1:
                segs[0] = (float("-inf"), r)
            else:
                segs.append((t * 1000.0, r))
        return segs

    def bandwidth_at(self, t_ms: float) -> float:
        segs = self._segments()
        idx = bisect.bisect_right([s for s, _ in segs], t_ms) - 1
        return segs[max(idx, 0)][1]

    def breakpoints_ms(self) -> list[float]:
        return [s for s, _ in self._segments()[1:]]

    def transfer_ms(self, volume_bytes: float, start_ms: float = 0.0) -> float:
        """Duration of a transfer started at ``start_ms``, integrating the piecewise rate."""
        bits = volume_bytes * BITS_PER_BYTE
        segs = self._segments()
        t = start_ms
        idx = max(bisect.bisect_right([s for s, _ in segs], t) - 1, 0)
        while True:
            rate_bits_per_ms = segs[idx][1] * BITS_PER_MEGABIT / 1000.0
            seg_end = segs[idx + 1][0] if idx + 1 < len(segs) else float("inf")
            needed = bits / rate_bits_per_ms
            if t + needed <= seg_end:
                return t + needed - start_ms + self.per_message_overhead_ms
            bits -= (seg_end - t) * rate_bits_per_ms
            t = seg_end
            idx += 1

    def at(self, t_ms: float) -> "NetworkState":
        """Constant-rate snapshot of this network at time ``t_ms``."""
        return NetworkState(self.bandwidth_at(t_ms), self.per_message_overhead_ms)

    def to_dict(self) -> dict:
        d = {"bandwidth_mbps": self.bandwidth_mbps, "per_message_overhead_ms": self.per_message_overhead_ms}
        if self.trace:
            d["trace"] = [list(p) for p in self.trace]
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "NetworkState":
        return cls(float(d["bandwidth_mbps"]), float(d.get("per_message_overhead_ms", 0.0)),
                   tuple(tuple(p) for p in d.get("trace", ())))


@dataclass(frozen=True)
class BatchPolicy:
    max_batch: int = 5
    window_ms: float = 10.0

    def to_dict(self) -> dict:
        return {"max_batch": self.max_batch, "window_ms": self.window_ms}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "BatchPolicy":
        return cls(int(d.get("max_batch", 5)), float(d.get("window_ms", 10.0)))


@dataclass(frozen=True)
class SystemConfig:
    devices: tuple[DeviceProfile, ...]
    models: Mapping[str, ModelProfile]
    network: NetworkState
    batch_policy: BatchPolicy = field(default_factory=BatchPolicy)
    worker_count: int = 2

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))

    def __hash__(self):
        return hash(canonical_json(self.to_dict()))

    @property
    def clients(self) -> tuple[DeviceProfile, ...]:
        return tuple(d for d in self.devices if d.role == "client")

    @property
    def client_ids(self) -> tuple[str, ...]:
        return tuple(d.device_id for d in self.clients)

    @property
    def idle(self) -> tuple[DeviceProfile, ...]:
        return tuple(d for d in self.devices if d.role == "idle")

    @property
    def server(self) -> DeviceProfile:
        servers = [d for d in self.devices if d.role == "server"]
        if len(servers) != 1:
            raise ConfigError([f"expected exactly one server, found {len(servers)}"])
        return servers[0]

    def device(self, device_id: str) -> DeviceProfile:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)

    def model_for(self, device_id: str) -> ModelProfile:
        return self.models[device_id]

    def with_network(self, network: NetworkState) -> "SystemConfig":
        return replace(self, network=network)

    def with_devices(self, devices: Iterable[DeviceProfile]) -> "SystemConfig":
        return replace(self, devices=tuple(devices))

    def to_dict(self) -> dict:
        return {
            "devices": [d.to_dict() for d in self.devices],
            "models": {k: m.to_dict() for k, m in self.models.items()},
            "network": self.network.to_dict(),
            "batch_policy": self.batch_policy.to_dict(),
            "worker_count": self.worker_count,
        }

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "SystemConfig":
        return cls(
            devices=tuple(DeviceProfile.from_dict(x) for x in d["devices"]),
            models={k: ModelProfile.from_dict(m) for k, m in d["models"].items()},
            network=NetworkState.from_dict(d["network"]),
            batch_policy=BatchPolicy.from_dict(d.get("batch_policy", {})),
            worker_count=int(d.get("worker_count", 2)),
        )

    @classmethod
    def from_json(cls, text: str) -> "SystemConfig":
        return cls.from_dict(json.loads(text))


def config_errors(config: SystemConfig, lut=None) -> list[str]:
    """Every invariant violation in ``config``; empty when the config is well formed.

    If ``lut`` is given, client models are also checked for LUT coverage.
    """
    errs: list[str] = []
    seen: set[str] = set()
    for d in config.devices:
        if d.device_id in seen:
            errs.append(f"duplicate device_id {d.device_id!r}")
        seen.add(d.device_id)
        if d.role not in ROLES:
            errs.append(f"device {d.device_id!r}: unknown role {d.role!r}")
    n_servers = sum(d.role == "server" for d in config.devices)
    if n_servers == 0:
        errs.append("no server device")
    elif n_servers > 1:
        errs.append(f"exactly one server required, found {n_servers}")
    for d in config.devices:
        if d.role == "server":
            continue
        model = config.models.get(d.device_id)
        if model is None:
            if d.role == "client":
                errs.append(f"missing model for client {d.device_id!r}")
            continue
        errs.extend(model.errors())
        if lut is not None and d.role == "client" and not lut.has_model(model.model_id):
            errs.append(f"model {model.model_id!r} for {d.device_id!r} is missing from the LUT store")
    net = config.network
    if not net.bandwidth_mbps > 0:
        errs.append("bandwidth must be positive")
    if any(not r > 0 for _, r in net.trace):
        errs.append("bandwidth must be positive in every trace segment")
    if net.per_message_overhead_ms < 0:
        errs.append("per_message_overhead_ms must be non-negative")
    if config.batch_policy.max_batch < 1:
        errs.append("max_batch must be at least 1")
    if config.batch_policy.window_ms < 0:
        errs.append("window_ms must be non-negative")
    if config.worker_count < 1:
        errs.append("worker_count must be at least 1")
    return errs


def validate_config(config: SystemConfig, lut=None) -> None:
    errs = config_errors(config, lut)
    if errs:
        raise ConfigError(errs)


def validate_scheme(config: SystemConfig, scheme: Scheme) -> None:
    errs = []
    ids = set(config.client_ids)
    assigned = scheme.device_ids
    if len(set(assigned)) != len(assigned):
        errs.append("scheme assigns a device more than once")
    for missing in ids - set(assigned):
        errs.append(f"scheme has no strategy for client {missing!r}")
    for extra in set(assigned) - ids:
        errs.append(f"scheme assigns unknown client {extra!r}")
    for d, s in scheme:
        if d in ids and not s.valid_for(config.model_for(d)):
            errs.append(f"strategy {s} out of range for {d!r}")
    idle_ids = {d.device_id for d in config.idle}
    for h in scheme.helpers:
        if h not in idle_ids:
            errs.append(f"helper {h!r} is not an idle device")
    if errs:
        raise ConfigError(errs)
