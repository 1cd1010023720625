from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh


def chamfer_distance(a, b) -> float:
    """Symmetric mean nearest-neighbour distance, halved."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise ValueError("chamfer_distance needs two non-empty point sets")
    d_ab, _ = cKDTree(b).query(a)
    d_ba, _ = cKDTree(a).query(b)
    return 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))


def mesh_chamfer(m1: TriMesh, m2: TriMesh, n: int = 10_000, seed: int = 0) -> float:
    return chamfer_distance(m1.sample_surface(n, seed), m2.sample_surface(n, seed + 1))
