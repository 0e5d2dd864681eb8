import os

import pytest

os.environ.setdefault("STRUCTSIEVE_THREADS", "1")

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def demos_dir():
    return os.path.join(ROOT, "demos")
