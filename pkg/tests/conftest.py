from __future__ import annotations

import pytest

from marlpipe.cluster_sim import Cluster, Simulator
from marlpipe.config import RunConfig
from marlpipe.object_store import ObjectStore


def make_cluster(nodes: int = 2, devices_per_node: int = 4, mem: int = 1 << 30, host: int = 1 << 33) -> Cluster:
    return Cluster(Simulator(), nodes, devices_per_node, mem, host)


@pytest.fixture
def cluster() -> Cluster:
    return make_cluster()


@pytest.fixture
def store(cluster: Cluster) -> ObjectStore:
    return ObjectStore(cluster)


def small_config(steps: int = 2, **sections) -> RunConfig:
    """Default cluster and workload, but fewer steps so runs stay quick."""
    return RunConfig().replace(steps=steps, **sections)
