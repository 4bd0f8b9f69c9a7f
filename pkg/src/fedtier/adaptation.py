"""Unseen-client pipeline: probe-basis extraction, cluster routing by mean
squared principal-angle cosine, and optional leaf fine-tuning.

A new client runs a few full-batch gradient steps on a fresh probe adapter on
top of the frozen root, takes the dominant left subspace of the probe's B
factor, and joins the cluster whose representative subspace it overlaps most.
It can then serve immediately through root + cluster, or refine a private
leaf adapter locally.
"""

from dataclasses import dataclass

import numpy as np

from .datagen import ClientSplit
from .errors import ConfigurationError, DegenerateInputError
from .federation import FederationConfig, ServerState, _rng
from .linalg import Matrix, frobenius_norm, orthonormal_columns, subspace_overlap
from .lora import AdapterPath, LoraAdapter, Tier, init_adapter, zero_adapter
from .metrics import accuracy
from .model import HeadModel, SgdConfig, local_update

_TAG_PROBE_INIT, _TAG_UNSEEN_LEAF_INIT, _TAG_UNSEEN_LEAF = 21, 22, 23


@dataclass
class ClusterRepresentative:
    """Orthonormal basis of one cluster's frozen B factor."""

    index: int
    basis: Matrix


def build_representatives(server: ServerState, rank: int) -> list[ClusterRepresentative]:
    """Top-r left singular bases of the frozen cluster adapters, by index."""
    if server.root is None or not server.clusters:
        raise ConfigurationError("server is not fully trained")
    reps = []
    for j in sorted(server.clusters):
        reps.append(ClusterRepresentative(
            index=j, basis=orthonormal_columns(server.clusters[j].b, rank)))
    return reps


def probe_basis(model: HeadModel, train, root_star: LoraAdapter, rank: int,
                steps: int, lr: float, seed: int = 0) -> Matrix:
    """Run `steps` full-batch gradient steps on a fresh probe adapter above the
    frozen root and return the probe B's dominant left subspace."""
    if steps < 1:
        raise ConfigurationError("probe needs at least one step")
    p, q = model.class_count, model.backbone.hidden_dim
    probe = init_adapter(p, q, rank, _rng(seed, _TAG_PROBE_INIT, 0, 0))
    path = AdapterPath(root=root_star, cluster=probe, leaf=zero_adapter(p, q, rank))
    opt = SgdConfig(lr=lr, epochs=steps, batch_mode="full")
    trained = local_update(model, path, train, Tier.CLUSTER, (), (), opt=opt)
    if frobenius_norm(trained.b) <= 1e-12:
        raise DegenerateInputError("probe basis stayed numerically zero")
    return orthonormal_columns(trained.b, rank)


def assign_cluster(u_u: Matrix, reps: list[ClusterRepresentative]) -> int:
    """Index of the representative with the largest mean squared principal-
    angle cosine; ties resolve to the lowest cluster index."""
    if not reps:
        raise ConfigurationError("no cluster representatives given")
    reps = sorted(reps, key=lambda rep: rep.index)
    scores = [subspace_overlap(u_u, rep.basis) / rep.basis.shape[1] for rep in reps]
    return reps[int(np.argmax(scores))].index


@dataclass
class AdaptationResult:
    assigned_cluster: int
    path: AdapterPath
    accuracy_trajectory: list[float]  # length epochs + 1, entry 0 = root+cluster


def adapt_unseen(model: HeadModel, client: ClientSplit, server: ServerState,
                 config: FederationConfig, epochs: int, seed: int = 0) -> AdaptationResult:
    """Route an unseen client, then fine-tune a fresh leaf for `epochs` local
    epochs, recording test accuracy after each epoch (entry 0 is the
    root+cluster model before any local work)."""
    if epochs < 0:
        raise ConfigurationError("epochs must be non-negative")
    reps = build_representatives(server, config.rank)
    u_u = probe_basis(model, client.train, server.root, config.rank,
                      steps=config.probe_steps, lr=config.lr, seed=seed)
    j = assign_cluster(u_u, reps)
    p, q = model.class_count, model.backbone.hidden_dim
    cluster_ad = server.clusters[j]
    leaf = init_adapter(p, q, config.rank, _rng(seed, _TAG_UNSEEN_LEAF_INIT, 0, 0))
    path = AdapterPath(root=server.root, cluster=cluster_ad, leaf=leaf, cluster_index=j)
    # the fresh leaf has b = 0, so this is exactly the root+cluster model
    trajectory = [accuracy(model, path, client.test)]
    frozen = (server.root.b, cluster_ad.b)
    gammas = (config.gamma_c, config.gamma_l)
    opt = SgdConfig(lr=config.lr, epochs=1, batch_mode=config.batch_mode,
                    batch_size=config.batch_size)
    for e in range(1, epochs + 1):
        leaf = local_update(model, path, client.train, Tier.LEAF, frozen, gammas,
                            opt=opt, rng=_rng(seed, _TAG_UNSEEN_LEAF, e, 0))
        path = AdapterPath(root=server.root, cluster=cluster_ad, leaf=leaf, cluster_index=j)
        trajectory.append(accuracy(model, path, client.test))
    return AdaptationResult(assigned_cluster=j, path=path,
                            accuracy_trajectory=trajectory)
