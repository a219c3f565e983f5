"""Session fixtures.  The end-to-end pipeline run is expensive, so it runs
once and is shared by the pipeline and acceptance tests."""

import time

import numpy as np
import pytest
from helpers import make_pipeline_config

from qcmfit.pipeline import run_pipeline


@pytest.fixture(scope="session")
def pipeline_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline_a")
    t0 = time.perf_counter()
    result = run_pipeline(make_pipeline_config(out))
    result.summary["_elapsed_s"] = time.perf_counter() - t0
    return result


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
