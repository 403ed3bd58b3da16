"""One FedPPA round seen from a single client.

Trains the four-client synthetic federation for one round, then replays the
alignment step for client 0 layer by layer. Each row shows the feature loss
between the aggregated model and the client's own pre-aggregation model,
before and after the local alignment steps. Later layers see inputs that
already went through the aligned earlier layers.

    python demos/alignment_walkthrough.py
"""
import numpy as np

from fedppa.aggregation import AggregationPlan, aggregate
from fedppa.alignment import AlignmentConfig, progressive_align
from fedppa.data import PartitionConfig
from fedppa.nn import SgdState, train_local
from fedppa.orchestrator import DataConfig, RunConfig, build_federation, clusters_for, init_state

cfg = RunConfig(
    strategies=("fedppa",),
    rounds=1,
    local_epochs=2,
    batch_size=16,
    partition=PartitionConfig(alpha=0.1, num_clients=4, seed=0, min_samples=8),
    data=DataConfig(source="synth", synth_per_class=24, synth_test_per_class=6, synth_image_size=12),
)
fed = build_federation(cfg)
state = init_state(cfg, fed, "fedppa")

trained = {}
for s in fed.shards:
    rng = np.random.default_rng([cfg.seed, s.client_id, 1])
    trained[s.client_id], _, _ = train_local(
        state.params[s.client_id], SgdState(), s.train.images, s.train.labels,
        epochs=cfg.local_epochs, batch_size=cfg.batch_size, cfg=cfg.sgd, rng=rng,
    )

[cluster] = clusters_for("fedppa", fed)
aggregated = aggregate(AggregationPlan((cluster,)), trained)

cid = 0
common = cluster.common_indices[cid]
print(f"client {cid} ({fed.archs[cid].name}) shares layers {list(common)} with the cluster")
_, report = progressive_align(aggregated[cid], trained[cid], fed.shards[0], common, AlignmentConfig(steps_per_layer=5))
print("  layer  loss before  loss after  steps  halvings")
for r in report.rows:
    print(f"  {r.layer:>5}  {r.loss_pre:11.5f}  {r.loss_post:10.5f}  {r.steps:>5}  {r.halvings:>8}")
print(f"  total  {report.loss_pre:11.5f}  {report.loss_post:10.5f}")
