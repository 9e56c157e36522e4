"""Keyed federated datasets: storage format and the preprocessing operations.

A dataset maps device ids to that device's samples. Samples are held as a
pair of arrays per device, ``x`` with shape ``(n, feature_dim)`` (float64) and
``y`` with shape ``(n,)`` (int64). All operations return new datasets.

File format (UTF-8 JSON)::

    {
      "users": ["f_00000", ...],
      "num_samples": [17, ...],
      "feature_dim": 60,
      "num_classes": 5,
      "hierarchy": {"f_00000": "group-a", ...},     # optional
      "user_data": {"f_00000": {"x": [[...], ...], "y": [0, ...]}, ...}
    }
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass
from typing import Iterator, Mapping

import numpy as np

from .errors import DataError, FormatError, SplitError
from .rng import stream

logger = logging.getLogger(__name__)

IID_DEVICE = "iid_all"


@dataclass(frozen=True)
class DeviceData:
    x: np.ndarray
    y: np.ndarray

    def __len__(self) -> int:
        return len(self.y)

    def take(self, idx: np.ndarray) -> "DeviceData":
        return DeviceData(self.x[idx], self.y[idx])


@dataclass(frozen=True)
class FederatedDataset:
    devices: dict[str, DeviceData]
    feature_dim: int
    num_classes: int
    hierarchy: dict[str, str] | None = None

    def __post_init__(self):
        for uid, dev in self.devices.items():
            _check_device(uid, dev.x, dev.y, self.feature_dim, self.num_classes)

    def __len__(self) -> int:
        return len(self.devices)

    def __iter__(self) -> Iterator[str]:
        return iter(self.devices)

    def __getitem__(self, uid: str) -> DeviceData:
        return self.devices[uid]

    @property
    def device_ids(self) -> list[str]:
        return list(self.devices)

    def counts(self) -> dict[str, int]:
        return {uid: len(dev) for uid, dev in self.devices.items()}

    @property
    def total_samples(self) -> int:
        return sum(len(dev) for dev in self.devices.values())

    def subset(self, ids) -> "FederatedDataset":
        """Restrict to ``ids``, keeping this dataset's device order."""
        keep = set(ids)
        devices = {uid: dev for uid, dev in self.devices.items() if uid in keep}
        return self._replace(devices)

    def _replace(self, devices: dict[str, DeviceData]) -> "FederatedDataset":
        hierarchy = None
        if self.hierarchy is not None:
            hierarchy = {uid: g for uid, g in self.hierarchy.items() if uid in devices}
        return FederatedDataset(devices, self.feature_dim, self.num_classes, hierarchy)

    @classmethod
    def from_arrays(cls, data: Mapping[str, tuple], feature_dim: int, num_classes: int,
                    hierarchy: dict[str, str] | None = None) -> "FederatedDataset":
        devices = {}
        for uid, (x, y) in data.items():
            x = np.asarray(x, dtype=np.float64).reshape(len(y), feature_dim)
            devices[uid] = DeviceData(x, np.asarray(y, dtype=np.int64))
        return cls(devices, feature_dim, num_classes, hierarchy)


def _check_device(uid, x, y, feature_dim, num_classes):
    if len(y) == 0:
        raise DataError(f"device {uid!r} has no samples")
    if x.ndim != 2 or x.shape != (len(y), feature_dim):
        raise FormatError(f"device {uid!r}: features have shape {x.shape}, "
                          f"expected ({len(y)}, {feature_dim})")
    if y.min() < 0 or y.max() >= num_classes:
        raise FormatError(f"device {uid!r}: label out of range [0, {num_classes})")


def equal(a: FederatedDataset, b: FederatedDataset) -> bool:
    """Structural equality: same devices in the same order with identical samples."""
    if (a.feature_dim, a.num_classes, a.hierarchy) != (b.feature_dim, b.num_classes, b.hierarchy):
        return False
    if list(a.devices) != list(b.devices):
        return False
    return all(np.array_equal(a[u].x, b[u].x) and np.array_equal(a[u].y, b[u].y) for u in a)


# -- file format -------------------------------------------------------------

def to_json_dict(ds: FederatedDataset) -> dict:
    out = {
        "users": ds.device_ids,
        "num_samples": [len(dev) for dev in ds.devices.values()],
        "feature_dim": ds.feature_dim,
        "num_classes": ds.num_classes,
    }
    if ds.hierarchy is not None:
        out["hierarchy"] = dict(ds.hierarchy)
    out["user_data"] = {
        uid: {"x": dev.x.tolist(), "y": dev.y.tolist()} for uid, dev in ds.devices.items()
    }
    return out


def dumps(ds: FederatedDataset) -> str:
    return json.dumps(to_json_dict(ds), separators=(",", ":"))


def save_dataset(ds: FederatedDataset, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps(ds))


def from_json_dict(obj: dict, source: str = "<memory>") -> FederatedDataset:
    try:
        users = obj["users"]
        num_samples = obj["num_samples"]
        user_data = obj["user_data"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{source}: missing required key {exc}") from None
    if not isinstance(users, list) or not isinstance(num_samples, list):
        raise FormatError(f"{source}: 'users' and 'num_samples' must be arrays")
    if len(users) != len(num_samples):
        raise FormatError(f"{source}: {len(users)} users but {len(num_samples)} sample counts")
    if len(set(users)) != len(users):
        raise FormatError(f"{source}: duplicate user ids")
    feature_dim = obj.get("feature_dim")
    num_classes = obj.get("num_classes")
    if not users:
        return FederatedDataset({}, int(feature_dim or 0), int(num_classes or 0),
                                obj.get("hierarchy"))
    if not isinstance(feature_dim, int) or not isinstance(num_classes, int):
        raise FormatError(f"{source}: 'feature_dim' and 'num_classes' must be integers")

    devices = {}
    for uid, declared in zip(users, num_samples):
        entry = user_data.get(uid)
        if entry is None:
            raise FormatError(f"{source}: device {uid!r} listed in users but has no user_data")
        xs, ys = entry.get("x"), entry.get("y")
        if xs is None or ys is None:
            raise FormatError(f"{source}: device {uid!r} lacks 'x' or 'y'")
        if len(xs) != declared or len(ys) != declared:
            raise FormatError(f"{source}: device {uid!r} declares {declared} samples "
                              f"but has {len(xs)} features / {len(ys)} labels")
        try:
            x = np.asarray(xs, dtype=np.float64)
            y = np.asarray(ys, dtype=np.int64)
        except (ValueError, TypeError):
            raise FormatError(f"{source}: device {uid!r} has ragged or non-numeric data") from None
        if declared == 0:
            raise FormatError(f"{source}: device {uid!r} has no samples")
        if x.ndim != 2 or x.shape[1] != feature_dim:
            raise FormatError(f"{source}: device {uid!r} feature length does not match "
                              f"feature_dim={feature_dim}")
        if y.min() < 0 or y.max() >= num_classes:
            raise FormatError(f"{source}: device {uid!r} has a label outside [0, {num_classes})")
        devices[uid] = DeviceData(x, y)

    hierarchy = obj.get("hierarchy")
    if hierarchy is not None and not isinstance(hierarchy, dict):
        raise FormatError(f"{source}: 'hierarchy' must be an object")
    return FederatedDataset(devices, feature_dim, num_classes, hierarchy)


def load_dataset(path: str | os.PathLike) -> FederatedDataset:
    try:
        with open(path, encoding="utf-8") as f:
            obj = json.load(f)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from None
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    return from_json_dict(obj, source=str(path))


# -- operations --------------------------------------------------------------

def filter_min_samples(ds: FederatedDataset, min_samples: int) -> FederatedDataset:
    if min_samples < 1:
        raise ValueError("min_samples must be >= 1")
    keep = [uid for uid, dev in ds.devices.items() if len(dev) >= min_samples]
    if not keep:
        logger.warning("filter_min_samples(k=%d) removed every device", min_samples)
    return ds.subset(keep)


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    # the epsilon keeps exact products such as 0.6 * 10 from flooring down
    n_train = math.floor(fractions[0] * n + 1e-9)
    n_val = math.floor(fractions[1] * n + 1e-9)
    return n_train, n_val, n - n_train - n_val


def split_train_val_test(ds: FederatedDataset, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Per-device shuffle then split; returns ``(train, val, test)``.

    Train and val sizes are floored, the test split takes the remainder. A
    split may come out empty (e.g. val for n=4); such devices are simply absent
    from that split's dataset.
    """
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    parts: tuple[dict, dict, dict] = ({}, {}, {})
    for uid, dev in ds.devices.items():
        n = len(dev)
        if n < 3:
            raise SplitError(f"device {uid!r} has {n} samples; at least 3 are needed to split "
                             "(filter with min_samples=3 first)")
        perm = stream(seed, "split", uid).permutation(n)
        n_train, n_val, _ = _split_counts(n, fractions)
        bounds = (0, n_train, n_train + n_val, n)
        for part, lo, hi in zip(parts, bounds[:-1], bounds[1:]):
            if hi > lo:
                part[uid] = dev.take(perm[lo:hi])
    return tuple(ds._replace(p) for p in parts)


def subsample_devices(ds: FederatedDataset, count: int | None = None,
                      fraction: float | None = None, seed: int = 0) -> FederatedDataset:
    if (count is None) == (fraction is None):
        raise ValueError("give exactly one of count or fraction")
    if fraction is not None:
        if not 0 < fraction <= 1:
            raise ValueError(f"fraction must be in (0, 1], got {fraction}")
        count = max(1, round(fraction * len(ds)))
    if count < 0 or count > len(ds):
        raise ValueError(f"cannot subsample {count} devices from {len(ds)}")
    chosen = stream(seed, "subsample").choice(len(ds), size=count, replace=False)
    ids = ds.device_ids
    return ds.subset(ids[i] for i in chosen)


def mix_iid(ds: FederatedDataset, seed: int = 0) -> FederatedDataset:
    """Pool every sample into the single device ``iid_all``, shuffled."""
    if len(ds) == 0:
        raise DataError("cannot mix an empty dataset")
    x = np.concatenate([dev.x for dev in ds.devices.values()])
    y = np.concatenate([dev.y for dev in ds.devices.values()])
    perm = stream(seed, "mix").permutation(len(y))
    return FederatedDataset({IID_DEVICE: DeviceData(x[perm], y[perm])},
                            ds.feature_dim, ds.num_classes)


@dataclass(frozen=True)
class DatasetStats:
    num_devices: int
    total_samples: int
    mean_samples_per_device: float
    stdev_samples_per_device: float

    def as_dict(self) -> dict:
        return {
            "num_devices": self.num_devices,
            "total_samples": self.total_samples,
            "mean_samples_per_device": self.mean_samples_per_device,
            "stdev_samples_per_device": self.stdev_samples_per_device,
        }


def stats_from_counts(counts) -> DatasetStats:
    counts = np.asarray(list(counts), dtype=np.int64)
    if counts.size == 0:
        raise ValueError("statistics of an empty dataset are undefined")
    total = int(counts.sum())
    mean = total / counts.size
    # population standard deviation
    std = math.sqrt(float(np.mean((counts - mean) ** 2)))
    return DatasetStats(int(counts.size), total, mean, std)


def dataset_stats(ds: FederatedDataset) -> DatasetStats:
    return stats_from_counts(ds.counts().values())
