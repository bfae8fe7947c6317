import numpy as np
import pytest

from budd.cube import SceneCube, SceneMeta
from datetime import date as Date, timedelta


def make_cube(modality="ndvi", height=4, width=4, n_scenes=3, seed=0,
              start=Date(2018, 1, 1), cadence=6, with_masks=False,
              cloud_fractions=None, pass_=None, orbit=None):
    """Small in-memory cube with reproducible random pixels."""
    rng = np.random.default_rng(seed)
    scenes, pixels, masks = [], [], []
    for i in range(n_scenes):
        cf = cloud_fractions[i] if cloud_fractions else None
        scenes.append(
            SceneMeta(
                date=start + timedelta(days=cadence * i),
                pass_=pass_,
                relative_orbit=orbit,
                cloud_fraction=cf,
                data_path="",
            )
        )
        pixels.append(rng.normal(0.5, 0.2, (height, width)).astype(np.float32))
        masks.append(rng.random((height, width)) > 0.3 if with_masks else None)
    return SceneCube(
        modality=modality,
        height=height,
        width=width,
        resolution_m=20.0,
        scenes=scenes,
        pixels=pixels,
        masks=masks,
    )


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
