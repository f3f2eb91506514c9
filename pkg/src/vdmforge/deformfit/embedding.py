from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from ..errors import DataError
from ..flatten import Plane


@dataclass(frozen=True)
class SquareEmbedding:
    """Placement of the unit parameter square in space.

    proj(u, v) = center + side * ((u - 0.5) * t + (v - 0.5) * b)
    """

    plane: Plane = field(default_factory=Plane.xy)
    side: float = 1.0
    center: np.ndarray = field(default_factory=lambda: np.array([0.5, 0.5, 0.0]))

    def __post_init__(self):
        if not self.side > 0:
            raise DataError("square side must be positive")
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        f = self.plane.frame
        if np.abs(f @ f.T - np.eye(3)).max() > 1e-9 or np.linalg.det(f) < 0:
            raise DataError("embedding frame is not right-handed orthonormal")

    @property
    def frame(self) -> np.ndarray:
        return self.plane.frame

    def proj(self, uv: ArrayLike) -> np.ndarray:
        uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2) - 0.5
        return self.center + self.side * (uv[:, :1] * self.plane.tangent + uv[:, 1:] * self.plane.bitangent)

    def to_canonical(self, x: ArrayLike) -> np.ndarray:
        """World points to the unit-tile frame used by VDMs (t=+x, b=+y, n=+z, square at [0,1]^2)."""
        local = (np.asarray(x, dtype=np.float64) - self.center) @ self.frame.T / self.side
        local[..., :2] += 0.5
        return local

    def from_canonical(self, c: ArrayLike) -> np.ndarray:
        c = np.array(c, dtype=np.float64)
        c[..., :2] -= 0.5
        return self.center + self.side * (c @ self.frame)

    def to_dict(self) -> dict:
        return {
            "normal": self.plane.normal.tolist(),
            "tangent": self.plane.tangent.tolist(),
            "side": self.side,
            "center": self.center.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SquareEmbedding":
        plane = Plane.from_point_normal(d["center"], d["normal"], d.get("tangent"))
        return cls(plane, float(d["side"]), np.asarray(d["center"], float))
