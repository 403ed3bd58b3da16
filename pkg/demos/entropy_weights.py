"""How label skew moves the entropy aggregation weights.

Partitions the bundled MNIST pool across eight clients at three values of
alpha and prints each client's label count, entropy and normalized weight.
At alpha = 0.5 every client sees most digits and the weights sit near 1/8.
At alpha = 0.01 single-digit clients get weight close to zero and the few
clients holding several digits dominate.

    python demos/entropy_weights.py
"""
import numpy as np

from fedppa.data import PartitionConfig, entropy_weights, load_bundled_mnist, partition_dirichlet

pool = load_bundled_mnist("train")

for alpha in (0.5, 0.1, 0.01):
    shards = partition_dirichlet(pool, PartitionConfig(alpha=alpha, num_clients=8, seed=0))
    ew = entropy_weights(shards)
    print(f"alpha={alpha}")
    print("  client  labels  train  entropy  weight")
    for k, s in enumerate(shards):
        labels = int(np.count_nonzero(s.label_histogram))
        print(f"  {s.client_id:>6}  {labels:>6}  {len(s.train):>5}  {ew.raw_entropy[k]:7.4f}  {ew.normalized[k]:.4f}")
    print(f"  variance of weights: {np.var(ew.normalized):.2e}\n")
