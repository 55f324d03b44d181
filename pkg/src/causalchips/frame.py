"""Unit-level data: treatment, outcome, tabular covariates and image keys."""

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
import pandas as pd

from .errors import AllDropped, CausalChipsError, NoControl, NoTreated

_RESERVED = ("key", "w", "y", "lon", "lat")


@dataclass
class CausalFrame:
    w: np.ndarray
    y: np.ndarray
    x: np.ndarray  # (N, P), P may be 0
    keys: List[str]
    lon: Optional[np.ndarray] = None
    lat: Optional[np.ndarray] = None
    x_names: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = len(self.w)
        x = np.empty((n, 0)) if self.x is None else np.asarray(self.x, dtype=np.float64)
        if x.size == 0:
            x = np.empty((n, 0))
        elif x.ndim == 1:
            x = x[:, None]
        self.x = x
        self.keys = [str(k) for k in self.keys]
        if not self.x_names:
            self.x_names = [f"x{j + 1}" for j in range(self.x.shape[1])]
        for name in ("lon", "lat"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))
        lengths = {len(self.y), self.x.shape[0], len(self.keys)}
        if lengths != {n}:
            raise CausalChipsError(f"frame columns have inconsistent lengths {sorted(lengths | {n})}")

    def __len__(self):
        return len(self.w)

    def subset(self, idx):
        idx = np.asarray(idx)
        return CausalFrame(
            self.w[idx],
            self.y[idx],
            self.x[idx],
            [self.keys[i] for i in idx],
            None if self.lon is None else self.lon[idx],
            None if self.lat is None else self.lat[idx],
            list(self.x_names),
        )

    def check(self):
        """Raise unless the frame is complete and has both treatment arms."""
        if len(self) == 0:
            raise AllDropped("frame has no units")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.x))):
            raise CausalChipsError("frame has missing or non-finite values")
        if not np.all((self.w == 0) | (self.w == 1)):
            raise CausalChipsError("treatment must be 0/1")
        if not np.any(self.w == 1):
            raise NoTreated("no treated units")
        if not np.any(self.w == 0):
            raise NoControl("no control units")
        return self

    def varying_x(self):
        """Copy with zero-variance covariate columns removed, plus the dropped names."""
        if self.x.shape[1] == 0:
            return self, []
        keep = np.std(self.x, axis=0) > 0
        dropped = [n for n, k in zip(self.x_names, keep) if not k]
        out = self.subset(np.arange(len(self)))
        out.x = self.x[:, keep]
        out.x_names = [n for n, k in zip(self.x_names, keep) if k]
        return out, dropped


def drop_na(frame: CausalFrame, available_keys=None):
    """Remove units with missing w, y, any x or an unresolvable key.

    Returns ``(clean_frame, dropped_indices)``; indices refer to the input
    order, which the clean frame preserves.
    """
    bad = ~np.isfinite(frame.w) | ~np.isfinite(frame.y)
    if frame.x.shape[1]:
        bad |= ~np.all(np.isfinite(frame.x), axis=1)
    bad |= np.array([not k or k == "nan" for k in frame.keys], dtype=bool)
    if available_keys is not None:
        bad |= np.array([k not in available_keys for k in frame.keys], dtype=bool)
    dropped = np.flatnonzero(bad)
    if len(dropped) == len(frame):
        raise AllDropped("every unit has missing data")
    return frame.subset(np.flatnonzero(~bad)), [int(i) for i in dropped]


def read_frame(path) -> CausalFrame:
    """Read ``key,w,y[,lon,lat],x1..xP``; missing cells become NaN."""
    df = pd.read_csv(path, dtype={"key": str}, keep_default_na=True, float_precision="round_trip")
    for col in ("key", "w", "y"):
        if col not in df.columns:
            raise CausalChipsError(f"{path}: column {col!r} missing")
    x_cols = [c for c in df.columns if c not in _RESERVED]
    try:
        x = df[x_cols].to_numpy(dtype=np.float64) if x_cols else np.empty((len(df), 0))
        w = df["w"].to_numpy(dtype=np.float64)
        y = df["y"].to_numpy(dtype=np.float64)
    except ValueError as exc:
        raise CausalChipsError(f"{path}: non-numeric value ({exc})") from exc
    keys = df["key"].fillna("").astype(str).tolist()
    lon = df["lon"].to_numpy(dtype=np.float64) if "lon" in df.columns else None
    lat = df["lat"].to_numpy(dtype=np.float64) if "lat" in df.columns else None
    return CausalFrame(w, y, x, keys, lon, lat, x_cols)


def write_frame(frame: CausalFrame, path):
    data = {"key": frame.keys, "w": frame.w, "y": frame.y}
    if frame.lon is not None:
        data["lon"] = frame.lon
    if frame.lat is not None:
        data["lat"] = frame.lat
    for j, name in enumerate(frame.x_names):
        data[name] = frame.x[:, j]
    df = pd.DataFrame(data)
    df.to_csv(path, index=False, float_format="%.17g")
