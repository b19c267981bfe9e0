import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from ihcsearch.pipeline import PipelineParams, run_benchmark, train_models
from ihcsearch.synth import SynthConfig, generate_case, generate_cases

settings.register_profile(
    "ihcsearch",
    deadline=None,
    max_examples=60,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.function_scoped_fixture],
)
settings.load_profile("ihcsearch")

BENCHMARK_SEEDS = tuple(range(42, 52))


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def models():
    return train_models(PipelineParams())


@pytest.fixture(scope="session")
def small_config():
    return SynthConfig(n_patients=4, n_first_label=2, width_px=900, height_px=900, seed=5)


@pytest.fixture(scope="session")
def small_case(small_config):
    return generate_case(small_config, 0)


class BenchmarkCache:
    """Full synthetic benchmark per seed, computed at most once per session."""

    def __init__(self):
        self.results = {}
        self.seconds = {}

    def __call__(self, seed):
        if seed not in self.results:
            start = time.perf_counter()
            params = PipelineParams(seed=seed)
            cases = ({**c.slides} for c in generate_cases(SynthConfig(seed=seed)))
            self.results[seed] = run_benchmark(cases, params)
            self.seconds[seed] = time.perf_counter() - start
        return self.results[seed]


@pytest.fixture(scope="session")
def benchmark():
    return BenchmarkCache()


# -- acceptance summary --------------------------------------------------------


def pytest_configure(config):
    config.acceptance_rows = []


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or (rep.when == "setup" and not rep.passed)):
        return
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    status = "PASS" if rep.passed else "SKIP" if rep.skipped else "FAIL"
    item.config.acceptance_rows.append((marker.args[0], status, detail))


def pytest_terminal_summary(terminalreporter, config):
    if config.acceptance_rows:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in config.acceptance_rows:
            terminalreporter.write_line(f"{status}  {name}: {detail}")
