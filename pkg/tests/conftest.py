import numpy as np
import pytest

from bhaug.geometry import PointCloud, knn_graph, normalize_cloud


def random_cloud(rng, n=48, label=0, id="c"):
    return PointCloud(rng.normal(size=(n, 3)), label=label, id=id)


def ellipsoid(n=512, axes=(1.0, 0.6, 0.4), seed=0):
    rng = np.random.default_rng(seed)
    u = rng.normal(size=(n, 3))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    return normalize_cloud(PointCloud(u * np.asarray(axes), label=0, id="ellipsoid"))


def random_connected_graph(rng, n, k=None):
    cloud = random_cloud(rng, n)
    return cloud, knn_graph(cloud, k or int(rng.integers(2, 6)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
