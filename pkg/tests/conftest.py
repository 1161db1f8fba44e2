import os

import pytest
from hypothesis import HealthCheck, settings

from pingflow.engine import Engine

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow,
                                                                           HealthCheck.function_scoped_fixture])
settings.load_profile("default")


@pytest.fixture
def make_engine(tmp_path):
    """Engine factory; every engine is closed (spill space removed) at teardown."""
    made = []

    def factory(worker_count=1, **kw):
        kw.setdefault("work_dir", str(tmp_path / "spill"))
        eng = Engine(worker_count=worker_count, **kw)
        made.append(eng)
        return eng

    yield factory
    for eng in made:
        eng.close()


@pytest.fixture
def engine(make_engine):
    return make_engine(1, max_partition_rows=1000)


def pytest_configure(config):
    os.environ.setdefault("PINGFLOW_LOG", "WARNING")
