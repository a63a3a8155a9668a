"""Batch range-sensor simulation on triangle meshes with BVH acceleration."""

import numba as _numba

# prefer OpenMP: thread safe for concurrent callers and no version warnings
_numba.config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]

from .errors import DirtyScene, InputError, InvariantError, MeshrayError  # noqa: E402
from .math3d import Aabb, Ray, Rotation, Transform  # noqa: E402
from .scene import Hit, Mesh, Scene, cast_rays, closest_hit  # noqa: E402
from .sensors import (  # noqa: E402
    CylindricalModel,
    DiscreteInterval,
    O1DnModel,
    OnDnModel,
    PinholeModel,
    SensorRig,
    SphericalModel,
    generate_ray,
    load_sensor,
    model_ray_count,
    vlp16_preset,
)
from .simulation import AttrSelection, PoseBatch, SimResult, simulate, simulate_ranges  # noqa: E402
from .noise import DustNoise, GaussianNoise, RelGaussianNoise, apply_noise, noise_rng  # noqa: E402
from .assets import load_mesh, load_poses, load_scene, make_ground_plane, make_icosphere  # noqa: E402

__version__ = "0.1.0"
