"""Low-rank adapters, path composition, and why aggregation happens in
product space.

Walks through: building (b, a) factor pairs, composing a root/cluster/leaf
path, the cross-term artifact of averaging factors separately, and the
truncated-SVD refactorization that turns an aggregated update back into a
rank-r adapter.
"""

import numpy as np

from fedtier import (LoraAdapter, AdapterPath, aggregate_product, aggregate_separate,
                     compose_path, delta, frobenius_norm, refactor, zero_adapter)

rng = np.random.default_rng(0)

# --- a single adapter and its update --------------------------------------
p, q, r = 4, 6, 2
adapter = LoraAdapter(b=rng.normal(size=(p, r)), a=rng.normal(size=(r, q)), rank=r)
print("one adapter: b", adapter.b.shape, "a", adapter.a.shape,
      "-> update rank", np.linalg.matrix_rank(delta(adapter)))

# --- a client path: root + cluster + leaf ----------------------------------
w0 = rng.normal(size=(p, q))
path = AdapterPath(root=adapter,
                   cluster=LoraAdapter(b=rng.normal(size=(p, r)),
                                       a=rng.normal(size=(r, q)), rank=r),
                   leaf=zero_adapter(p, q, r))
w_eff = compose_path(path, w0)
print("composed weight with a zero leaf equals w0 + root + cluster:",
      np.allclose(w_eff, w0 + delta(path.root) + delta(path.cluster)))

# --- cross terms: the classic two-client example ---------------------------
e = np.eye(2)
client1 = LoraAdapter(b=e[:, :1], a=e[:1, :], rank=1)   # update E11
client2 = LoraAdapter(b=e[:, 1:], a=e[1:, :], rank=1)   # update E22
product = aggregate_product([client1, client2], [0.5, 0.5])
separate = delta(aggregate_separate([client1, client2], [0.5, 0.5]))
print("\nproduct-space aggregate:\n", product)
print("separate-averaging aggregate:\n", separate)
print("Frobenius gap between the two:", frobenius_norm(product - separate))

# --- refactorization --------------------------------------------------------
mix = aggregate_product(
    [LoraAdapter(b=rng.normal(size=(p, r)), a=rng.normal(size=(r, q)), rank=r)
     for _ in range(5)],
    [0.2] * 5)
print("\naggregate of five rank-2 updates has rank", np.linalg.matrix_rank(mix))
back = refactor(mix, r)
print("refactorized to rank", back.rank,
      "| reconstruction error:", round(frobenius_norm(mix - delta(back)), 6),
      "| b columns orthonormal:",
      np.allclose(back.b.T @ back.b, np.eye(r), atol=1e-10))
