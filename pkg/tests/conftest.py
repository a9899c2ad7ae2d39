import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

import pytest

from isrl.envgen import EnvSpec, build_benchmark


@pytest.fixture(scope="session")
def small_bench():
    return build_benchmark(EnvSpec(sizes=(126, 126, 48), seed=0))

