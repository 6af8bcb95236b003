import numpy as np
import pytest

from meshsculpt.denoiser import DenoiserConfig, DenoiserPlan, init_params
from meshsculpt.diffusion import make_schedule
from meshsculpt.editing import EditModel
from meshsculpt.hierarchy import build_hierarchy
from meshsculpt.primitives import make_icosahedron, make_sphere
from meshsculpt.training import Normalization


@pytest.fixture(scope="session")
def ico():
    return make_icosahedron()


@pytest.fixture(scope="session")
def small_sphere():
    # 72-vertex ellipsoid, roughly face-sized in mm
    return make_sphere(8, 10, (95.0, 80.0, 100.0))


@pytest.fixture(scope="session")
def small_hierarchy(small_sphere):
    topo, ref = small_sphere
    return build_hierarchy(topo, ref, 3, (1.0, 0.3, 0.1), spiral_length=7)


def build_edit_model(topo, ref, hierarchy, T=20, seed=0, hidden=24, t_freqs=8, t_dim=8):
    """EditModel around randomly initialized params (localization is structural,
    so most editing tests do not need a trained network)."""
    cfg = DenoiserConfig(hidden=hidden, layers=2, embed_dim=8, t_freqs=t_freqs, t_dim=t_dim)
    params = init_params(cfg, hierarchy, np.random.default_rng(seed))
    schedule = make_schedule(T, 1e-3, 0.25)
    norm = Normalization.fit(ref.positions)
    return EditModel(
        topology=topo,
        hierarchy=hierarchy,
        plan=DenoiserPlan(hierarchy),
        params=params,
        schedule=schedule,
        norm=norm,
        mean_shape=ref.positions.copy(),
        k_max=3,
        full_mask_probability=0.1,
    )


@pytest.fixture(scope="session")
def edit_model(small_sphere, small_hierarchy):
    topo, ref = small_sphere
    return build_edit_model(topo, ref, small_hierarchy)
