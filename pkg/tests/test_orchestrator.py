import csv
import json

import numpy as np
import pytest

from conftest import synth_run_config
from fedppa import orchestrator
from fedppa.alignment import AlignmentConfig
from fedppa.data import ClientDataset, PartitionConfig
from fedppa.errors import InputError
from fedppa.nn import ParameterSet, SgdState, accuracy, forward, train_local
from fedppa.orchestrator import (
    CSV_HEADER,
    DataConfig,
    RoundError,
    RunConfig,
    build_federation,
    clusters_for,
    evaluate_global,
    evaluate_personalized,
    global_representative,
    init_state,
    load_checkpoint,
    pool_size,
    run_experiment,
    run_round,
    run_strategy,
    save_checkpoint,
    summary_text,
)
from oracles import naive_accuracy


@pytest.fixture(scope="module")
def fed():
    return build_federation(synth_run_config())


def _csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.reader(fh))


def _same_params(a, b):
    return all(
        x.weight.tobytes() == y.weight.tobytes() and x.bias.tobytes() == y.bias.tobytes()
        for x, y in zip(a.layers, b.layers)
    )


# ---------------------------------------------------------------------------
# configuration


def test_default_assignment_spreads_the_family():
    cfg = RunConfig(partition=PartitionConfig(num_clients=8))
    assert cfg.assignment == tuple("AABBCCDD")
    with pytest.raises(InputError):
        RunConfig(assignment=("A",))
    with pytest.raises(InputError):
        RunConfig(strategies=("fedprox",))
    with pytest.raises(InputError):
        RunConfig(rounds=0)


def test_thread_cap_from_environment(monkeypatch):
    monkeypatch.setenv("FEDPPA_THREADS", "2")
    assert pool_size(8) == 2
    monkeypatch.setenv("FEDPPA_THREADS", "junk")
    assert pool_size(8) == 8
    monkeypatch.delenv("FEDPPA_THREADS")
    assert pool_size(0) == 1


# ---------------------------------------------------------------------------
# rounds


def test_single_round_writes_header_and_one_row(tmp_path, fed):
    cfg = synth_run_config(rounds=1)
    run_strategy(cfg, fed, "fedppa", tmp_path / "m.csv")
    rows = _csv(tmp_path / "m.csv")
    assert rows[0] == list(CSV_HEADER)
    assert len(rows) == 2 and rows[1][0] == "1"
    assert len(rows[1][2].split(";")) == 4


def test_rounds_are_gap_free_and_flushed(tmp_path, fed):
    cfg = synth_run_config(rounds=3)
    seen = []

    def on_round(strategy, metrics):
        # every finished round is already on disk when the callback fires
        seen.append(len(_csv(tmp_path / "m.csv")) - 1)

    res = run_strategy(cfg, fed, "maxcommon", tmp_path / "m.csv", on_round=on_round)
    assert [m.round for m in res.history] == [1, 2, 3]
    assert seen == [1, 2, 3]


@pytest.mark.parametrize("workers", [4, 8])
def test_csv_is_bitwise_reproducible_across_worker_counts(tmp_path, fed, workers):
    cfg = synth_run_config(strategies=("fedppa+",))
    run_strategy(cfg, fed, "fedppa+", tmp_path / "a.csv")
    run_strategy(cfg, fed, "fedppa+", tmp_path / "b.csv")
    run_strategy(synth_run_config(strategies=("fedppa+",), workers=workers), fed, "fedppa+", tmp_path / "c.csv")
    a = (tmp_path / "a.csv").read_bytes()
    assert a == (tmp_path / "b.csv").read_bytes() == (tmp_path / "c.csv").read_bytes()


def test_maxcommon_equals_fedppa_without_alignment_steps(fed):
    cfg = synth_run_config(alignment=AlignmentConfig(steps_per_layer=0, sample_cap=64))
    a = run_strategy(cfg, fed, "maxcommon")
    b = run_strategy(cfg, fed, "fedppa")
    for x, y in zip(a.history, b.history):
        assert x.client_acc == y.client_acc and x.global_acc == y.global_acc


def test_fedavg_is_symmetric_on_a_homogeneous_federation():
    cfg = synth_run_config(assignment=("B",) * 4, rounds=1, strategies=("fedavg",))
    base = build_federation(cfg)
    # every client gets the same shard so only the local rng differs
    shard = base.shards[0]
    shards = [ClientDataset(cid, shard.train, shard.test, shard.indices) for cid in range(4)]
    fed = build_federation(cfg, base.shards[0].train, base.full_test, shards)
    state = init_state(cfg, fed, "fedavg")
    shared = state.params[0]
    state.params = {cid: ParameterSet(cid, shared.arch, [lp.copy() for lp in shared.layers]) for cid in range(4)}
    new, metrics = run_round(state, cfg, fed)
    for cid in range(1, 4):
        assert _same_params(new.params[cid], new.params[0])
    assert len(set(metrics.client_acc)) == 1


def test_unshared_heads_keep_their_locally_trained_values(fed):
    # tiny family: A, B, C and D heads sit in different positions
    cfg = synth_run_config(rounds=1, strategies=("maxcommon",))
    state = init_state(cfg, fed, "maxcommon")
    new, _ = run_round(state, cfg, fed)
    [cluster] = clusters_for("maxcommon", fed)
    for s in fed.shards:
        cid = s.client_id
        head = len(fed.archs[cid]) - 1
        assert head not in cluster.common_indices[cid]
        local, _, _ = train_local(state.params[cid], SgdState(), s.train.images, s.train.labels, epochs=1,
                                  batch_size=cfg.batch_size, cfg=cfg.sgd, rng=np.random.default_rng([cfg.seed, cid, 1]))
        assert new.params[cid].layers[head].weight.tobytes() == local.layers[head].weight.tobytes()


def test_evaluate_personalized_matches_naive_loop(fed):
    cfg = synth_run_config(rounds=1)
    state = init_state(cfg, fed, "fedppa")
    accs, mean = evaluate_personalized(state, fed, workers=3)
    for s, acc in zip(fed.shards, accs):
        model = state.params[s.client_id]
        assert acc == naive_accuracy(lambda img: forward(model, img[None])[0][0], s.test.images, s.test.labels)
    assert mean == pytest.approx(np.mean(accs), abs=0)


def test_untrained_models_are_near_chance(fed):
    cfg = synth_run_config(local_epochs=0, rounds=1, strategies=("maxcommon",))
    res = run_strategy(cfg, fed, "maxcommon")
    assert res.history[0].global_acc < 0.5


def test_global_model_of_a_homogeneous_cluster_is_the_uniform_average():
    cfg = synth_run_config(assignment=("C",) * 4, rounds=1, strategies=("maxcommon",))
    fed = build_federation(cfg)
    state = init_state(cfg, fed, "maxcommon")
    new, metrics = run_round(state, cfg, fed)
    assert metrics.global_client == 0
    avg = [np.mean([p.layers[j].weight for p in new.params.values()], axis=0) for j in range(len(fed.archs[0]))]
    for j, lp in enumerate(new.global_params.layers):
        assert np.allclose(lp.weight, avg[j], rtol=0, atol=1e-12)
    assert metrics.global_acc == accuracy(new.global_params, fed.full_test.images, fed.full_test.labels)
    with pytest.raises(InputError):
        evaluate_global(state, fed.full_test)


def test_global_representative_prefers_large_then_deep_clusters(fed):
    cluster, client = global_representative(clusters_for("fedavg", fed))
    assert len(cluster.member_clients) == 1 and client == cluster.member_clients[0]
    cluster, client = global_representative(clusters_for("fedppa", fed))
    assert cluster.member_clients == tuple(fed.client_ids)
    depths = {cid: cluster.depth(cid) for cid in cluster.member_clients}
    assert depths[client] == max(depths.values())


def test_entropy_weighting_changes_the_global_model():
    cfg = synth_run_config(rounds=1, partition=PartitionConfig(alpha=0.1, num_clients=4, seed=0, min_samples=8))
    fed = build_federation(cfg)
    a, _ = run_round(init_state(cfg, fed, "fedppa"), cfg, fed)
    b, _ = run_round(init_state(cfg, fed, "fedppa+"), cfg, fed)
    assert not _same_params(a.global_params, b.global_params)


def test_uniform_histograms_make_fedppa_plus_equal_fedppa(tmp_path):
    cfg = synth_run_config(partition=PartitionConfig(alpha=1e6, num_clients=4, seed=0, min_samples=8))
    base = build_federation(cfg)
    # force equal label histograms by giving every client the same shard
    s0 = base.shards[0]
    shards = [ClientDataset(cid, s0.train, s0.test, s0.indices) for cid in range(4)]
    fed = build_federation(cfg, s0.train, base.full_test, shards)
    run_strategy(cfg, fed, "fedppa", tmp_path / "a.csv")
    run_strategy(cfg, fed, "fedppa+", tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


# ---------------------------------------------------------------------------
# failure handling and persistence


def test_failed_round_writes_a_crash_report(tmp_path, fed, monkeypatch):
    def boom(*args, **kwargs):
        raise FloatingPointError("loss is nan")

    monkeypatch.setattr(orchestrator, "train_local", boom)
    with pytest.raises(RoundError, match="round 1"):
        run_strategy(synth_run_config(rounds=2), fed, "fedppa", tmp_path / "m.csv")
    report = json.loads((tmp_path / "crash_fedppa.json").read_text())
    assert report["round"] == 1 and report["seed"] == 0
    assert report["error"] == "FloatingPointError: loss is nan" and "boom" in report["traceback"]
    assert _csv(tmp_path / "m.csv") == [list(CSV_HEADER)]


def test_checkpoint_round_trip(tmp_path, fed):
    cfg = synth_run_config(rounds=1)
    state, _ = run_round(init_state(cfg, fed, "fedppa"), cfg, fed)
    save_checkpoint(state, tmp_path / "c.npz")
    back = load_checkpoint(tmp_path / "c.npz", "fedppa", fed)
    assert back.round_index == 1
    for cid in fed.client_ids:
        assert _same_params(back.params[cid], state.params[cid])
        for a, b in zip(back.opt_states[cid].velocity, state.opt_states[cid].velocity):
            assert a.weight.tobytes() == b.weight.tobytes()
    # resuming from the checkpoint continues exactly like the uninterrupted run
    cont, m1 = run_round(back, cfg, fed)
    ref, m2 = run_round(state, cfg, fed)
    assert m1.csv_row() == m2.csv_row()


def test_experiment_outputs_are_byte_identical_in_fresh_directories(tmp_path):
    cfg = synth_run_config(strategies=("fedavg", "fedppa+"), checkpoint=True)
    run_experiment(cfg, tmp_path / "one")
    run_experiment(cfg, tmp_path / "two")
    names = sorted(p.name for p in (tmp_path / "one").iterdir())
    assert names == ["accuracy_fedavg.svg", "accuracy_fedppa_plus.svg", "checkpoints", "metrics_fedavg.csv",
                     "metrics_fedppa_plus.csv", "personalized_accuracy.svg", "summary.txt"]
    for name in names:
        if name != "checkpoints":
            assert (tmp_path / "one" / name).read_bytes() == (tmp_path / "two" / name).read_bytes()
    assert len(list((tmp_path / "one" / "checkpoints").iterdir())) == 4


def test_summary_lists_best_rounds():
    cfg = synth_run_config(strategies=("fedavg", "fedppa"))
    result = run_experiment(cfg)
    text = summary_text(cfg, result)
    assert text.startswith("[experiment]\n")
    assert "data = synth" in text and "heads_common = no" in text
    best = text.split("[best]\n")[1].splitlines()
    assert best[0].split() == ["strategy", "personalized_acc", "round", "global_acc", "round"]
    fedppa = best[2].split()
    value, rnd = result.results["fedppa"].best()
    assert fedppa[0] == "FedPPA" and fedppa[1] == f"{100 * value:.2f}" and fedppa[2] == str(rnd)


def test_idx_source_round_trips_through_files(tmp_path):
    from fedppa.data import synth_dataset, write_idx

    train, test = synth_dataset(10, 8, 1, (1, 12, 12)), synth_dataset(10, 2, 2, (1, 12, 12))
    write_idx(train, tmp_path / "ti", tmp_path / "tl")
    write_idx(test, tmp_path / "vi", tmp_path / "vl")
    data = DataConfig(source="idx", train_images=str(tmp_path / "ti"), train_labels=str(tmp_path / "tl"),
                      test_images=str(tmp_path / "vi"), test_labels=str(tmp_path / "vl"))
    fed = build_federation(synth_run_config(data=data))
    assert sum(len(s.indices) for s in fed.shards) == 80 and len(fed.full_test) == 20
