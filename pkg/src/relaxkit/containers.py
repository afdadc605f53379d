"""Core data containers and their on-disk format.

All rasters are 2D slices. The exchange format is deliberately primitive so it
can be parsed from any language: a directory holding ``meta.json`` plus
``data.bin`` with little-endian float32 values, row-major, channel-last.
Containers are immutable after construction and safe to share across threads.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ContainerFormatError, InvariantError, VersionMismatchError

FORMAT_VERSION = 1
_DTYPE_TAG = "f32le"


class SequenceKind(str, Enum):
    """Pulse-sequence family; fixes the signal model and parameter channels."""

    INVERSION_RECOVERY = "inversion_recovery"
    SPIN_ECHO_DECAY = "spin_echo_decay"

    @property
    def channels(self) -> tuple[str, ...]:
        if self is SequenceKind.INVERSION_RECOVERY:
            return ("A", "B", "T1")
        return ("A", "T2")

    @property
    def n_params(self) -> int:
        return len(self.channels)


CHANNELS_T1 = SequenceKind.INVERSION_RECOVERY.channels
CHANNELS_T2 = SequenceKind.SPIN_ECHO_DECAY.channels


def kind_for_channels(channels: tuple[str, ...]) -> SequenceKind:
    for kind in SequenceKind:
        if kind.channels == tuple(channels):
            return kind
    raise InvariantError(f"unknown parameter channel set {channels!r}")


@dataclass(frozen=True)
class AcquisitionProtocol:
    """Acquisition times (inversion or echo times, ms) and known noise level."""

    sequence_kind: SequenceKind
    tau_ms: np.ndarray
    sigma: Optional[float] = None

    def __post_init__(self):
        tau = np.asarray(self.tau_ms, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "tau_ms", tau)
        if tau.size < self.sequence_kind.n_params:
            raise InvariantError(
                f"need at least {self.sequence_kind.n_params} acquisition times "
                f"for {self.sequence_kind.value}, got {tau.size}"
            )
        if not np.all(np.isfinite(tau)) or np.any(tau <= 0):
            raise InvariantError("acquisition times must be finite and positive")
        if np.any(np.diff(tau) <= 0):
            raise InvariantError("acquisition times must be strictly increasing")
        if self.sigma is not None:
            sigma = float(self.sigma)
            if not np.isfinite(sigma) or sigma <= 0:
                raise InvariantError("sigma must be positive when present")
            object.__setattr__(self, "sigma", sigma)

    @property
    def n_images(self) -> int:
        return int(self.tau_ms.size)

    def with_sigma(self, sigma: Optional[float]) -> "AcquisitionProtocol":
        return AcquisitionProtocol(self.sequence_kind, self.tau_ms.copy(), sigma)


@dataclass(frozen=True)
class ParameterMap:
    """Per-pixel tissue parameters: (A, B, T1) or (A, T2), times in ms.

    In-memory data is float64; the disk format quantizes to float32.
    """

    channels: tuple[str, ...]
    data: np.ndarray  # (H, W, Q) float64
    mask: Optional[np.ndarray] = None  # (H, W) bool

    def __post_init__(self):
        channels = tuple(self.channels)
        object.__setattr__(self, "channels", channels)
        kind = kind_for_channels(channels)
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3 or arr.shape[2] != len(channels):
            raise InvariantError(
                f"parameter data must be (H, W, {len(channels)}), got {arr.shape}"
            )
        object.__setattr__(self, "data", arr)
        if self.mask is not None:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != arr.shape[:2]:
                raise InvariantError("mask shape must match the map")
            object.__setattr__(self, "mask", mask)
        self._validate_ranges(kind)

    def _validate_ranges(self, kind: SequenceKind):
        arr = self.data
        if not np.all(np.isfinite(arr)):
            raise InvariantError("parameter values must be finite")
        if np.any(arr[..., self.channels.index("A")] < 0):
            raise InvariantError("A must be non-negative")
        t_name = "T1" if kind is SequenceKind.INVERSION_RECOVERY else "T2"
        if np.any(arr[..., self.channels.index(t_name)] <= 0):
            raise InvariantError(f"{t_name} must be positive")
        if kind is SequenceKind.INVERSION_RECOVERY:
            b = arr[..., self.channels.index("B")]
            if np.any(b <= 0) or np.any(b > 2):
                raise InvariantError("B must lie in (0, 2]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def sequence_kind(self) -> SequenceKind:
        return kind_for_channels(self.channels)

    def channel(self, name: str) -> np.ndarray:
        return self.data[..., self.channels.index(name)]


@dataclass(frozen=True)
class WeightedSeries:
    """A series of N weighted images with its acquisition protocol."""

    protocol: AcquisitionProtocol
    data: np.ndarray  # (H, W, N) float64 in memory; float32 on disk

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise InvariantError(f"series data must be (H, W, N), got {arr.shape}")
        if arr.shape[2] != self.protocol.n_images:
            raise InvariantError(
                f"series has {arr.shape[2]} channels but protocol lists "
                f"{self.protocol.n_images} acquisition times"
            )
        if not np.all(np.isfinite(arr)):
            raise InvariantError("series values must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[:2]

    @property
    def n_images(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class TissueLabelMap:
    """Integer tissue classes; 0 is background, everything else needs a legend entry."""

    labels: np.ndarray  # (H, W) small ints
    legend: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise InvariantError(f"label map must be 2D, got shape {labels.shape}")
        if not np.issubdtype(labels.dtype, np.integer):
            raise InvariantError("labels must be integers")
        labels = labels.astype(np.int32, copy=False)
        object.__setattr__(self, "labels", labels)
        legend = {int(k): str(v) for k, v in self.legend.items()}
        object.__setattr__(self, "legend", legend)
        present = set(np.unique(labels).tolist()) - {0}
        missing = present - set(legend)
        if missing:
            raise InvariantError(f"labels {sorted(missing)} missing from legend")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @property
    def mask(self) -> np.ndarray:
        return self.labels > 0


Container = ParameterMap | WeightedSeries | TissueLabelMap

_KIND_TAGS = {
    ParameterMap: "parameter_map",
    WeightedSeries: "weighted_series",
    TissueLabelMap: "tissue_label_map",
}


def _write_json_atomic(path: str, payload: dict):
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)


def save_container(obj: Container, path: str | os.PathLike) -> None:
    """Write a container to ``path`` (a directory) as meta.json + data.bin."""
    path = os.fspath(path)
    tag = _KIND_TAGS.get(type(obj))
    if tag is None:
        raise ContainerFormatError(f"cannot save object of type {type(obj).__name__}")
    os.makedirs(path, exist_ok=True)

    meta: dict = {
        "format_version": FORMAT_VERSION,
        "kind": tag,
        "dtype": _DTYPE_TAG,
        "tau_ms": None,
        "sigma": None,
        "channels": None,
    }
    if isinstance(obj, ParameterMap):
        meta["shape"] = [*obj.shape, obj.n_channels]
        meta["channels"] = list(obj.channels)
        payload = obj.data
        if obj.mask is not None:
            meta["has_mask"] = True
            with open(os.path.join(path, "mask.bin"), "wb") as fh:
                fh.write(obj.mask.astype(np.uint8).tobytes())
    elif isinstance(obj, WeightedSeries):
        meta["shape"] = [*obj.shape, obj.n_images]
        meta["channels"] = [f"tau={t:g}" for t in obj.protocol.tau_ms]
        meta["sequence_kind"] = obj.protocol.sequence_kind.value
        meta["tau_ms"] = [float(t) for t in obj.protocol.tau_ms]
        meta["sigma"] = obj.protocol.sigma
        payload = obj.data
    else:
        meta["shape"] = [*obj.shape, 1]
        meta["channels"] = ["label"]
        meta["legend"] = {str(k): v for k, v in sorted(obj.legend.items())}
        payload = obj.labels.astype(np.float32)[..., None]

    with open(os.path.join(path, "data.bin"), "wb") as fh:
        fh.write(np.ascontiguousarray(payload, dtype="<f4").tobytes())
    _write_json_atomic(os.path.join(path, "meta.json"), meta)


def load_container(path: str | os.PathLike) -> Container:
    """Read a container directory back; validates format version and invariants."""
    path = os.fspath(path)
    meta_path = os.path.join(path, "meta.json")
    if not os.path.isfile(meta_path):
        raise ContainerFormatError(f"no meta.json under {path}")
    with open(meta_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ContainerFormatError(f"corrupt meta.json: {exc}") from exc

    version = meta.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"container format version {version!r} not supported (expected {FORMAT_VERSION})"
        )
    if meta.get("dtype") != _DTYPE_TAG:
        raise ContainerFormatError(f"unsupported dtype tag {meta.get('dtype')!r}")

    shape = meta.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(s, int) and s > 0 for s in shape)
    ):
        raise ContainerFormatError(f"bad shape {shape!r} in meta.json")
    h, w, c = shape

    with open(os.path.join(path, "data.bin"), "rb") as fh:
        raw = fh.read()
    expected = h * w * c * 4
    if len(raw) != expected:
        raise ContainerFormatError(
            f"data.bin holds {len(raw)} bytes but meta.json implies {expected}"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(h, w, c).astype(np.float64)

    kind = meta.get("kind")
    if kind == "parameter_map":
        mask = None
        if meta.get("has_mask"):
            with open(os.path.join(path, "mask.bin"), "rb") as fh:
                mraw = fh.read()
            if len(mraw) != h * w:
                raise ContainerFormatError("mask.bin size does not match shape")
            mask = np.frombuffer(mraw, dtype=np.uint8).reshape(h, w).astype(bool)
        return ParameterMap(tuple(meta["channels"]), data, mask)
    if kind == "weighted_series":
        protocol = AcquisitionProtocol(
            SequenceKind(meta["sequence_kind"]),
            np.asarray(meta["tau_ms"], dtype=np.float64),
            meta.get("sigma"),
        )
        return WeightedSeries(protocol, data)
    if kind == "tissue_label_map":
        labels = data[..., 0]
        rounded = np.rint(labels)
        if not np.array_equal(labels, rounded):
            raise ContainerFormatError("label payload holds non-integer values")
        legend = {int(k): v for k, v in meta.get("legend", {}).items()}
        return TissueLabelMap(rounded.astype(np.int32), legend)
    raise ContainerFormatError(f"unknown container kind {kind!r}")
