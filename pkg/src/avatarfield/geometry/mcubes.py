"""Iso-surface extraction. The table-driven work is delegated to scikit-image."""

from __future__ import annotations

import numpy as np
from skimage import measure

from .mesh import TriMesh


def marching_cubes(field, bbox_min, bbox_max, resolution, level: float = 0.0) -> TriMesh:
    """Extract the ``level`` set of ``field`` sampled on a regular node grid.

    ``field`` is either a callable mapping (N, 3) points to N values or an
    already-sampled array of shape ``resolution``. Faces are oriented with
    normals pointing toward increasing field values (outward for an SDF).
    Returns an empty mesh when the field never crosses ``level``.
    """
    bbox_min = np.asarray(bbox_min, dtype=np.float64)
    bbox_max = np.asarray(bbox_max, dtype=np.float64)
    res = np.broadcast_to(np.asarray(resolution, dtype=np.int64), (3,))
    if callable(field):
        axes = [np.linspace(bbox_min[a], bbox_max[a], res[a]) for a in range(3)]
        pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)
        values = np.asarray(field(pts), dtype=np.float64).reshape(tuple(res))
    else:
        values = np.asarray(field, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("field must be finite over the grid")
    if not (values.min() < level < values.max()):
        return TriMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    spacing = (bbox_max - bbox_min) / (res - 1)
    verts, faces, _, _ = measure.marching_cubes(
        values, level=level, spacing=tuple(spacing), gradient_direction="ascent", method="lewiner"
    )
    mesh = TriMesh(verts + bbox_min, faces).cleaned()
    # skimage's winding depends on the gradient convention; enforce positive volume
    if mesh.n_faces and mesh.signed_volume() < 0:
        mesh = TriMesh(mesh.vertices, mesh.faces[:, ::-1])
    return mesh
