"""Routing clients that never trained, then adapting them locally.

Holds out a quarter of the clients, trains the federation on the rest, and
routes each held-out client by probing its adaptation subspace against the
frozen cluster representatives. Prints the per-epoch accuracy trajectory of
the optional leaf fine-tuning.
"""

import math
from collections import Counter

from fedtier import (ClusterShift, FederationConfig, adapt_unseen, gen_pool,
                     partition, run_protocol, split_unseen)

pool = gen_pool(class_count=12, feature_dim=8, per_class=320, separation=3.0, seed=23)
data = partition(pool, ClusterShift(k_true=3, rotation_angle=math.pi / 2,
                                    label_subset_size=3), n_clients=40, seed=23)
data = split_unseen(data, fraction=0.25, seed=23)
print("participating:", data.n_clients, "| held out as unseen:", len(data.unseen))

config = FederationConfig(n_clients=30, rank=2, t_root=10, t_cluster=25, t_leaf=15,
                          total_budget=50, lr=0.1, local_epochs=4, ema_decay=0.97,
                          batch_mode="full", master_seed=5, hidden_dim=32)
fed = run_protocol(config, data)

# map each planted group to the learned cluster its members mostly landed in
truth = data.true_clusters
labels = fed.server.assignment.labels
home = {g: Counter(int(labels[i]) for i in range(30) if truth[i] == g).most_common(1)[0][0]
        for g in sorted(set(int(x) for x in truth))}
print("planted group -> learned cluster:", home)

correct = 0
for u, client in enumerate(fed.data.unseen):
    result = adapt_unseen(fed.model, client, fed.server, fed.config, epochs=5,
                          seed=100 + u)
    ok = result.assigned_cluster == home[client.true_cluster]
    correct += ok
    traj = " -> ".join(f"{a:.2f}" for a in result.accuracy_trajectory)
    print(f"unseen {u:2d}: group {client.true_cluster} routed to "
          f"{result.assigned_cluster} ({'ok' if ok else 'MISS'}) | accuracy {traj}")

print(f"\nrouting accuracy: {correct}/{len(fed.data.unseen)}")
print("(epoch 0 is the root+cluster model before any local fine-tuning)")
