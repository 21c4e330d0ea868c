import numpy as np
import pytest

from critgen import highd
from critgen.scenario import load_database


@pytest.fixture(scope="session")
def synthetic_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("recordings")
    paths = highd.synthetic_recordings(d, 6, rng_seed=5)
    return d, paths


@pytest.fixture(scope="session")
def small_db(tmp_path_factory, synthetic_dir):
    _, paths = synthetic_dir
    out = tmp_path_factory.mktemp("db") / "db.json"
    report = highd.build_database(paths, out, rng_seed=5)
    assert report.count == len(paths)
    return out, load_database(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
