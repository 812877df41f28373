import sys

import numpy as np
import pytest

from hintnet.model import Batch, HyperParams, InputDims, init_params
from hintnet.pipeline import build_dataset
from hintnet.synth import SynthSpec, generate


def random_batch(rng, B=3, T=7, w=3, n_st=4, n_t=5, n_s=3):
    """Small random batch with a valid row-normalized adjacency per sample."""
    P = w * w
    A = np.abs(rng.normal(size=(B, P, P)))
    A = A + np.swapaxes(A, 1, 2)
    A /= A.sum(axis=-1, keepdims=True)
    return Batch(
        st=rng.normal(size=(B, T, P, n_st)),
        temporal=rng.normal(size=(B, T, n_t)),
        spatial=rng.normal(size=(B, P, n_s)),
        adjacency=A,
        target=rng.normal(size=B),
    )


def small_hyper(**kw):
    base = dict(w=3, h=3, h_l=4, s_d=3, lstm_input=4, epochs=5, batch_size=4, patience=3)
    base.update(kw)
    return HyperParams(**base)


def small_params(rng, hyper=None, n_st=4, n_t=5, n_s=3):
    hyper = hyper or small_hyper()
    return init_params(InputDims(n_st, n_t, n_s), hyper, rng)


@pytest.fixture(scope="session")
def tiny_world(tmp_path_factory):
    """A 16x16, 120-day synthetic world written to disk once per session."""
    out = tmp_path_factory.mktemp("world")
    spec = SynthSpec(
        rows=16,
        cols=16,
        num_days=120,
        seed=3,
        urban_centers=((8.0, 8.0),),
        urban_radius=2.5,
        suburban_radius=5.5,
        corridors=(((0.5, 1.5), (15.5, 14.5)),),
        n_weather_stations=6,
        n_traffic_stations=6,
    )
    world = generate(spec, out)
    return world


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    f = tiny_world.files
    return build_dataset(
        tiny_world.spec.grid,
        f["accidents"],
        f["roads"],
        poi=f["poi"],
        stations=f["stations"],
        holidays=f["holidays"],
        train_days=range(80),
        n_spec=4,
    )


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
