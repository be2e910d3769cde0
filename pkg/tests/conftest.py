import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

from rsvr.channel import SystemConfig, sample_channels
from rsvr.formulation import build_problem
from rsvr.scene import scene_from_predictions, standard_ladder, fixture_grid, fixture_users

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def make_scene(K=2, L=3, scale=4.0):
    return scene_from_predictions(fixture_grid(), standard_ladder(L, scale=scale),
                                  fixture_users(K, normalize=True))


def make_problem(case="pp", K=2, N=4, M=4, seed=1, eps=0.1, P=1.0, common=True, L=3, scale=4.0):
    scene = make_scene(K, L, scale)
    cfg = SystemConfig(M=M, K=K, N=N, P=P)
    ch = sample_channels(cfg, seed)
    return build_problem(case, scene, scene.probability_models(case, eps), ch, cfg, common=common)


@pytest.fixture
def scene2():
    return make_scene()


@pytest.fixture
def problem_pp():
    return make_problem("pp")
