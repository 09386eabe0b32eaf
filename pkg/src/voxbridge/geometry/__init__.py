from .closest import MeshDistanceQuery, brute_force_closest, signed_distance
from .cortex import (
    AUX_CHANNELS,
    ConditionSet,
    assd,
    build_condition_set,
    cortical_thickness,
    default_edge_tau,
    edge_map,
    fuse_cortex_sdf,
    sample_sdf_grid,
    sample_surface_points,
    simulate_atrophy,
)
from .isosurface import extract_isosurface
from .mesh import (
    MeshFormatError,
    MeshTopologyError,
    TriMesh,
    face_areas,
    face_normals,
    icosphere,
    load_mesh,
    midthickness,
    require_closed,
    save_mesh,
    validate_mesh,
    vertex_normals,
)
from .volume import Volume, VolumeFormatError, load_volume, save_volume

__all__ = [
    "AUX_CHANNELS",
    "ConditionSet",
    "MeshDistanceQuery",
    "MeshFormatError",
    "MeshTopologyError",
    "TriMesh",
    "Volume",
    "VolumeFormatError",
    "assd",
    "brute_force_closest",
    "build_condition_set",
    "cortical_thickness",
    "default_edge_tau",
    "edge_map",
    "extract_isosurface",
    "face_areas",
    "face_normals",
    "fuse_cortex_sdf",
    "icosphere",
    "load_mesh",
    "load_volume",
    "midthickness",
    "require_closed",
    "sample_sdf_grid",
    "sample_surface_points",
    "save_mesh",
    "save_volume",
    "signed_distance",
    "simulate_atrophy",
    "validate_mesh",
    "vertex_normals",
]
