import numpy as np
import pytest

from fedtier import (ClusterShift, FederationConfig, build_model, gen_pool,
                     partition, run_protocol, split_unseen)


@pytest.fixture(scope="session")
def clustershift_data():
    """38 clients in 3 latent groups (2 labels + a quarter-turn rotation each),
    20% held out as unseen: 30 participating, 8 unseen."""
    pool = gen_pool(class_count=8, feature_dim=8, per_class=300, separation=3.0, seed=5)
    data = partition(pool, ClusterShift(k_true=3, rotation_angle=np.pi / 2,
                                        label_subset_size=2),
                     n_clients=38, seed=5)
    return split_unseen(data, 0.2, seed=5)


@pytest.fixture(scope="session")
def trained_fed(clustershift_data):
    """One fully trained federation shared by read-only tests."""
    cfg = FederationConfig(n_clients=30, rank=2, t_root=20, t_cluster=20, t_leaf=10,
                           total_budget=50, lr=0.05, batch_mode="full",
                           master_seed=1, hidden_dim=32)
    return run_protocol(cfg, clustershift_data)


@pytest.fixture()
def toy_model():
    return build_model(feature_dim=4, class_count=3, hidden_dim=6, seed=9)
