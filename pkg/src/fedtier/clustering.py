"""Client clustering in the low-rank-update subspace.

Per-client adapter bases are Frobenius-normalized and smoothed across rounds
with an exponential moving average. Pairwise distances come from principal
angles between the dominant left subspaces (d = 1 - mean squared cosine), a
Gaussian kernel with the median off-diagonal distance turns distances into
affinities, and a normalized-Laplacian spectral step with deterministic
seeded k-means produces the grouping. The cluster count is picked by the
eigengap of the Laplacian spectrum over a configurable range.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, PreconditionError
from .linalg import Matrix, frobenius_norm, orthonormal_columns, subspace_overlap

_DEGENERATE_NORM = 1e-300
_KMEANS_RESTARTS = 20
_KMEANS_TOL = 1e-10
_KMEANS_MAX_ITER = 300


@dataclass
class BasisTracker:
    """EMA-smoothed, unit-Frobenius-norm adapter basis per client."""

    decay: float
    bases: dict[int, Matrix] = field(default_factory=dict)
    rounds: int = 0

    def __post_init__(self):
        if not 0.0 < self.decay < 1.0:
            raise ConfigurationError("EMA decay must lie in (0, 1)")


def ema_update(tracker: BasisTracker, client: int, b_new: Matrix) -> BasisTracker:
    """Fold a freshly trained basis into the client's smoothed basis.

    The first observation seeds the average directly; afterwards
    mixed = decay * old + (1 - decay) * normalized(new), renormalized.
    """
    norm = frobenius_norm(b_new)
    if norm <= _DEGENERATE_NORM:
        raise DegenerateInputError(f"client {client} basis has zero norm")
    bhat = np.asarray(b_new, dtype=np.float64) / norm
    old = tracker.bases.get(client)
    if old is None:
        tracker.bases[client] = bhat.copy()
        return tracker
    mixed = tracker.decay * old + (1.0 - tracker.decay) * bhat
    mnorm = frobenius_norm(mixed)
    if mnorm <= _DEGENERATE_NORM:
        raise DegenerateInputError(f"client {client} EMA collapsed to zero")
    tracker.bases[client] = mixed / mnorm
    return tracker


def pairwise_distance(u_i: Matrix, u_j: Matrix, r: int) -> float:
    """Principal-angle distance 1 - (1/r) * sum of squared cosines, in [0, 1]."""
    u_i = np.asarray(u_i)
    u_j = np.asarray(u_j)
    if u_i.shape[1] != r or u_j.shape[1] != r:
        raise PreconditionError(f"bases must have exactly r={r} columns")
    d = 1.0 - subspace_overlap(u_i, u_j) / r
    return min(max(d, 0.0), 1.0)


def distance_matrix(bases: list[list[Matrix]]) -> Matrix:
    """Symmetric zero-diagonal client-distance matrix, averaged over layers.

    `bases[i]` lists client i's per-layer orthonormal bases; every client must
    expose the same layer count and per-layer shape.
    """
    n = len(bases)
    if n == 0:
        raise ConfigurationError("no client bases given")
    layers = len(bases[0])
    if layers == 0 or any(len(b) != layers for b in bases):
        raise ConfigurationError("clients disagree on the layer count")
    for layer in range(layers):
        shapes = {b[layer].shape for b in bases}
        if len(shapes) != 1:
            raise ConfigurationError(f"layer {layer} bases disagree on shape: {shapes}")
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            avg = sum(pairwise_distance(bases[i][k], bases[j][k], bases[i][k].shape[1])
                      for k in range(layers)) / layers
            d[i, j] = avg
            d[j, i] = avg
    return d


def median_offdiag_distance(d: Matrix) -> float:
    """Median of all off-diagonal entries (the Gaussian kernel bandwidth)."""
    n = d.shape[0]
    if n < 2:
        raise PreconditionError("at least two clients are needed")
    mask = ~np.eye(n, dtype=bool)
    return float(np.median(d[mask]))


def affinity(d: Matrix) -> Matrix:
    """Gaussian-kernel affinity with unit diagonal.

    A zero bandwidth (all clients at distance zero) falls back to the all-ones
    matrix; callers flag that case through the assignment diagnostics.
    """
    sigma = median_offdiag_distance(d)
    if sigma == 0.0:
        return np.ones_like(d)
    s = np.exp(-(d * d) / (2.0 * sigma * sigma))
    np.fill_diagonal(s, 1.0)
    return s


def laplacian_sym(s: Matrix) -> Matrix:
    """Symmetric normalized Laplacian I - D^{-1/2} S D^{-1/2}."""
    deg = s.sum(axis=1)
    if np.any(deg <= 0):
        raise PreconditionError("affinity rows must have positive sums")
    inv_sqrt = 1.0 / np.sqrt(deg)
    lap = np.eye(s.shape[0]) - inv_sqrt[:, None] * s * inv_sqrt[None, :]
    return (lap + lap.T) / 2.0


def _farthest_point_init(points: Matrix, k: int, rng: np.random.Generator) -> Matrix:
    n = points.shape[0]
    first = int(rng.integers(n))
    centers = [points[first]]
    dist = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(k - 1):
        nxt = int(np.argmax(dist))
        centers.append(points[nxt])
        dist = np.minimum(dist, np.sum((points - centers[-1]) ** 2, axis=1))
    return np.stack(centers)


def _lloyd(points: Matrix, centers: Matrix):
    k = centers.shape[0]
    labels = np.zeros(points.shape[0], dtype=np.int64)
    for _ in range(_KMEANS_MAX_ITER):
        d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
        labels = np.argmin(d2, axis=1)
        moved = 0.0
        new_centers = centers.copy()
        for c in range(k):
            members = points[labels == c]
            if len(members) == 0:
                continue  # an empty cluster keeps its previous center
            new_centers[c] = members.mean(axis=0)
            moved = max(moved, float(np.max(np.abs(new_centers[c] - centers[c]))))
        centers = new_centers
        if moved <= _KMEANS_TOL:
            break
    d2 = np.sum((points[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    labels = np.argmin(d2, axis=1)
    objective = float(np.sum(d2[np.arange(points.shape[0]), labels]))
    return labels, objective


def _kmeans(points: Matrix, k: int, seed: int) -> np.ndarray:
    """Seeded farthest-point k-means; best objective over fixed restarts."""
    best_labels, best_obj = None, np.inf
    for restart in range(_KMEANS_RESTARTS):
        rng = np.random.default_rng([seed, restart])
        centers = _farthest_point_init(points, k, rng)
        labels, obj = _lloyd(points, centers)
        if obj < best_obj:
            best_labels, best_obj = labels, obj
    return best_labels


def spectral_cluster(s: Matrix, k: int, seed: int = 0) -> np.ndarray:
    """Normalized-Laplacian spectral clustering into k groups.

    Rows of the k bottom eigenvectors are row-normalized and clustered with
    the deterministic seeded k-means above.
    """
    n = s.shape[0]
    if k < 2:
        raise ConfigurationError("spectral clustering needs k >= 2")
    if k > n:
        raise ConfigurationError(f"k={k} exceeds the client count {n}")
    lap = laplacian_sym(s)
    _, vecs = np.linalg.eigh(lap)
    emb = vecs[:, :k].copy()
    norms = np.sqrt(np.sum(emb * emb, axis=1))
    nonzero = norms > _DEGENERATE_NORM
    emb[nonzero] /= norms[nonzero, None]
    return _kmeans(emb, k, seed)


def select_k(s: Matrix, k_min: int, k_max: int):
    """Eigengap selection: K maximizing lambda_{K+1} - lambda_K of the
    normalized Laplacian over [k_min, k_max]; ties pick the smallest K.

    Gaps within 1e-12 of the maximum count as tied, so eigensolver noise
    cannot defeat the smallest-K rule on exactly degenerate spectra.
    """
    n = s.shape[0]
    if not 2 <= k_min <= k_max <= n - 1:
        raise ConfigurationError(
            f"selection range [{k_min}, {k_max}] invalid for {n} clients")
    evals = np.linalg.eigvalsh(laplacian_sym(s))
    gaps = np.array([evals[k] - evals[k - 1] for k in range(k_min, k_max + 1)])
    k_star = k_min + int(np.argmax(gaps >= gaps.max() - 1e-12))
    return k_star, gaps


@dataclass
class ClusterAssignment:
    """Selected cluster count, client labels, and pipeline diagnostics."""

    k_star: int
    labels: np.ndarray
    eigengaps: np.ndarray
    k_range: tuple[int, int]
    sigma: float
    eigenvalues: np.ndarray
    distances: Matrix
    affinities: Matrix | None = None
    degenerate: bool = False

    def members(self, j: int) -> list[int]:
        return [int(i) for i in np.flatnonzero(self.labels == j)]

    @property
    def cluster_ids(self) -> list[int]:
        return sorted(int(j) for j in set(self.labels.tolist()))


def _relabel_by_first_appearance(labels: np.ndarray) -> np.ndarray:
    mapping = {}
    out = np.zeros_like(labels)
    for i, lab in enumerate(labels.tolist()):
        if lab not in mapping:
            mapping[lab] = len(mapping)
        out[i] = mapping[lab]
    return out


def cluster_clients(tracker: BasisTracker, k_min: int = 2, k_max: int | None = None,
                    seed: int = 0, expected_clients: int | None = None) -> ClusterAssignment:
    """Run the full pipeline on the tracker's smoothed bases.

    Bases are reduced to their dominant left subspaces, pairwise distances and
    affinities are formed, the eigengap picks K, and spectral clustering
    produces the labels. Fewer than three clients cannot support eigengap
    selection and fall back to a single flagged cluster.
    """
    clients = sorted(tracker.bases)
    if expected_clients is not None and len(clients) != expected_clients:
        raise ConfigurationError(
            f"tracker has {len(clients)} bases but {expected_clients} clients participate")
    n = len(clients)
    if n == 0:
        raise ConfigurationError("tracker holds no client bases")
    if n < 3:
        return ClusterAssignment(
            k_star=1, labels=np.zeros(n, dtype=np.int64),
            eigengaps=np.array([]), k_range=(1, 1), sigma=0.0,
            eigenvalues=np.zeros(n), distances=np.zeros((n, n)), degenerate=True)
    r = tracker.bases[clients[0]].shape[1]
    bases = [[orthonormal_columns(tracker.bases[i], r)] for i in clients]
    d = distance_matrix(bases)
    sigma = median_offdiag_distance(d)
    s = affinity(d)
    lo = max(2, k_min)
    hi = min(k_max if k_max is not None else min(10, n - 1), n - 1)
    if hi < lo:
        raise ConfigurationError(f"empty selection range [{lo}, {hi}]")
    k_star, gaps = select_k(s, lo, hi)
    if sigma == 0.0:
        # all clients share a subspace; the embedding carries no information,
        # so every client lands in one flagged cluster
        labels = np.zeros(n, dtype=np.int64)
    else:
        labels = _relabel_by_first_appearance(spectral_cluster(s, k_star, seed))
    evals = np.linalg.eigvalsh(laplacian_sym(s))
    return ClusterAssignment(k_star=k_star, labels=labels, eigengaps=gaps,
                             k_range=(lo, hi), sigma=sigma, eigenvalues=evals,
                             distances=d, affinities=s, degenerate=(sigma == 0.0))
