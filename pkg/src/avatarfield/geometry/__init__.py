from .bvh import (
    BvhIndex,
    ParityViolation,
    build_bvh,
    closest_distance,
    crossing_table,
    drop_unpaired,
    inside_mesh,
    intersect_rays,
    ray_mesh_intersections,
)
from .chamfer import chamfer_distance, mesh_chamfer
from .mcubes import marching_cubes
from .mesh import MeshError, TriMesh, icosphere, load_obj, load_ply, save_obj, save_ply
from .sdf import SdfVolume, bake_sdf, sample_trilinear
