import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)




def pytest_terminal_summary(terminalreporter):
    import sys
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and hasattr(mod, "RESULTS"):
            lines = mod.RESULTS
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
