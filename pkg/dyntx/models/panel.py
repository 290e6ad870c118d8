import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from dyntx.core.exceptions import ConfigError

# Configure logging
logger = logging.getLogger(__name__)

CSV_COLUMNS = ["id", "t", "y", "d", "x", "z", "w0"]


@dataclass(frozen=True, eq=False)
class PanelData:
    """
    N individuals observed over T periods; arrays are (n, T) except w0, which is (n,) or None.
    """

    y: np.ndarray
    d: np.ndarray
    x: np.ndarray
    z: np.ndarray
    w0: Optional[np.ndarray] = None

    def __post_init__(self):
        for name in ("y", "d", "x", "z"):
            object.__setattr__(self, name, np.ascontiguousarray(np.asarray(getattr(self, name), dtype=np.int64)))
        shapes = {self.y.shape, self.d.shape, self.x.shape, self.z.shape}
        if len(shapes) != 1 or self.y.ndim != 2:
            raise ValueError(f"panel arrays must share one (n, T) shape, got {sorted(shapes)}")
        if self.w0 is not None:
            w0 = np.asarray(self.w0, dtype=np.int64)
            if w0.shape != (self.y.shape[0],):
                raise ValueError("w0 must have one entry per individual")
            object.__setattr__(self, "w0", w0)
        for name in ("y", "d", "z"):
            values = getattr(self, name)
            if values.size and (values.min() < 0 or values.max() > 1):
                raise ValueError(f"column {name} must be binary")

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    def check(self, grid_sizes: Optional[Sequence[int]] = None, irreversible_d: bool = False,
              irreversible_y: bool = False) -> None:
        """
        Verify grid bounds and row-wise irreversibility.
        """
        if grid_sizes is not None:
            if len(grid_sizes) != self.T:
                raise ValueError(f"panel has {self.T} periods, grid has {len(grid_sizes)}")
            upper = np.asarray(grid_sizes)[None, :]
            if (self.x < 0).any() or (self.x >= upper).any():
                raise ValueError("x index outside the grid")
        if irreversible_d and (np.diff(self.d, axis=1) < 0).any():
            raise ValueError("treatment path leaves the absorbing state")
        if irreversible_y and (np.diff(self.y, axis=1) < 0).any():
            raise ValueError("outcome path leaves the absorbing state")

    def take(self, rows: np.ndarray) -> "PanelData":
        """Rows (individuals) by index, keeping each full path intact."""
        return PanelData(
            self.y[rows], self.d[rows], self.x[rows], self.z[rows],
            None if self.w0 is None else self.w0[rows],
        )

    def stratum(self, w0: int) -> "PanelData":
        if self.w0 is None:
            if w0 != 0:
                raise KeyError(f"panel carries no stratum column; w0={w0} unavailable")
            return self
        return self.take(np.flatnonzero(self.w0 == w0))

    def strata(self):
        return [0] if self.w0 is None else sorted(int(v) for v in np.unique(self.w0))

    @classmethod
    def concat(cls, panels: Sequence["PanelData"]) -> "PanelData":
        has_w0 = [p.w0 is not None for p in panels]
        w0 = np.concatenate([p.w0 for p in panels]) if all(has_w0) else None
        return cls(
            np.concatenate([p.y for p in panels]),
            np.concatenate([p.d for p in panels]),
            np.concatenate([p.x for p in panels]),
            np.concatenate([p.z for p in panels]),
            w0,
        )

    def to_frame(self) -> pd.DataFrame:
        """Long format, t ascending within id (1-based ids and periods)."""
        n, T = self.y.shape
        frame = pd.DataFrame(
            {
                "id": np.repeat(np.arange(1, n + 1), T),
                "t": np.tile(np.arange(1, T + 1), n),
                "y": self.y.ravel(),
                "d": self.d.ravel(),
                "x": self.x.ravel(),
                "z": self.z.ravel(),
            }
        )
        frame["w0"] = pd.array(np.repeat(self.w0, T) if self.w0 is not None else [pd.NA] * (n * T), dtype="Int64")
        return frame[CSV_COLUMNS]

    @classmethod
    def from_frame(cls, frame: pd.DataFrame) -> "PanelData":
        missing = [c for c in CSV_COLUMNS if c not in frame.columns and c != "w0"]
        if missing:
            raise ConfigError(f"panel CSV lacks columns {missing}", key=missing[0])
        frame = frame.sort_values(["id", "t"], kind="mergesort")
        counts = frame.groupby("id", sort=False).size()
        if counts.nunique() != 1:
            raise ConfigError("panel is unbalanced: every id needs the same number of periods", key="t")
        T = int(counts.iloc[0])
        n = len(counts)

        def wide(column: str) -> np.ndarray:
            return frame[column].to_numpy(dtype=np.int64).reshape(n, T)

        w0 = None
        if "w0" in frame.columns and frame["w0"].notna().any():
            w0 = frame["w0"].to_numpy(dtype=np.int64).reshape(n, T)[:, 0]
        return cls(wide("y"), wide("d"), wide("x"), wide("z"), w0)

    def write_csv(self, path: str) -> None:
        self.to_frame().to_csv(path, index=False, lineterminator="\n")
        logger.info(f"Wrote panel with {self.n} individuals x {self.T} periods to {path}")

    @classmethod
    def read_csv(cls, path: str) -> "PanelData":
        frame = pd.read_csv(path)
        panel = cls.from_frame(frame)
        logger.info(f"Read panel with {panel.n} individuals x {panel.T} periods from {path}")
        return panel
