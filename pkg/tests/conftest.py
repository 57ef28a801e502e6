import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from snplab.core import Batch, ModelConfig, init_params
from snplab.tasks import SuiteSpec, generate_task_suite, make_rng

settings.register_profile("default", max_examples=40, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def tiny_config():
    return ModelConfig(4, 3, 3, (5,), "tanh", 5.0)


@pytest.fixture
def tiny_batch(tiny_config):
    rng = make_rng(123)
    return Batch(rng.standard_normal((6, 4)), np.array([0, 1, 2, 0, 1, 2]), rng.standard_normal((3, 3)))


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, make_rng(7))


@pytest.fixture(scope="session")
def small_spec():
    return SuiteSpec(n_seen=4, n_unseen_per_seen=1, classes_per_task=3, samples_per_class=12,
                     query_per_class=4, input_dim=4, descriptor_dim=4)


@pytest.fixture(scope="session")
def small_suite(small_spec):
    return generate_task_suite(3, small_spec)


@pytest.fixture(scope="session")
def small_model(small_spec):
    return ModelConfig(small_spec.input_dim, small_spec.descriptor_dim, 4, (6,), "relu", 10.0)


# one verdict line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: dict[str, str] = {}


@pytest.fixture
def verdict(request):
    key = request.node.name.split("_")[1].upper()

    def record(ok: bool, detail: str) -> bool:
        line = f"{key:<5} {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[key] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
            terminalreporter.write_line(ACCEPTANCE[key])
