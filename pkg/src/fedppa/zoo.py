"""Heterogeneous model family and max-common-layer clustering.

The family has four members ``A < B < C < D`` that play the role of the
VGG-11/13/16/19 ladder at desk scale. Each deeper model repeats a shallower
one's leading layers and then inserts extra blocks, so the models form a
prefix tree. With the default ``maxpool`` stem the per-pair common-prefix
lengths are:

=====  ==  ==  ==  ==
\\      A   B   C   D
=====  ==  ==  ==  ==
A      11   6   6   6
B       6  13   9   9
C       6   9  15  14
D       6   9  14  17
=====  ==  ==  ==  ==

Clustering groups clients by their leading layer signatures. Inside a
cluster the aggregation scope of a layer position is the set of members whose
signatures agree on every layer up to and including that position, so a
layer shared by three architectures averages over all their clients while a
deeper layer shared by just two of them averages over those two only.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

from .errors import InputError
from .nn import LayerSpec, ModelArchitecture

FAMILY_NAMES = ("A", "B", "C", "D")

_SCALES = {
    # conv widths of the two conv stages and the dense hidden width
    "tiny": {"c1": 4, "c2": 8, "hidden": 32, "stem": True},
    "small": {"c1": 8, "c2": 16, "hidden": 64, "stem": False},
}

# Expected common-prefix lengths for the layouts below, indexed like FAMILY_NAMES.
PREFIX_TABLE = {
    True: ((11, 6, 6, 6), (6, 13, 9, 9), (6, 9, 15, 14), (6, 9, 14, 17)),
    False: ((10, 5, 5, 5), (5, 12, 8, 8), (5, 8, 14, 13), (5, 8, 13, 16)),
}


def _spatial_out(input_shape, pools):
    c, h, w = input_shape
    for _ in range(pools):
        h, w = h // 2, w // 2
    return h * w


def build_family(scale: str = "tiny", input_shape=(1, 28, 28), num_classes: int = 10) -> list:
    """The four architectures ``A..D`` for ``scale`` in ``{"tiny", "small"}``."""
    if scale not in _SCALES:
        raise InputError(f"scale must be one of {sorted(_SCALES)}, got {scale!r}")
    cfg = _SCALES[scale]
    c_in = input_shape[0]
    c1, c2, hidden = cfg["c1"], cfg["c2"], cfg["hidden"]
    conv, relu, pool, flat, dense = (
        LayerSpec.conv,
        LayerSpec.relu,
        LayerSpec.maxpool,
        LayerSpec.flatten,
        LayerSpec.dense,
    )

    stem = [pool()] if cfg["stem"] else []
    pools = len(stem) + 2
    features = c2 * _spatial_out(input_shape, pools)

    block1 = [conv(c_in, c1), relu(), pool()]
    head = [flat(), dense(features, hidden), relu(), dense(hidden, num_classes)]

    a = stem + block1 + [conv(c1, c2), relu(), pool()] + head
    b = stem + block1 + [conv(c1, c2), relu(), conv(c2, c2), relu(), pool()] + head
    c = b[:-4] + [conv(c2, c2), relu()] + head
    d = c[:-1] + [dense(hidden, hidden), relu(), dense(hidden, num_classes)]
    return [
        ModelArchitecture(name, input_shape, layers, num_classes)
        for name, layers in zip(FAMILY_NAMES, (a, b, c, d))
    ]


def family_by_name(scale="tiny", input_shape=(1, 28, 28), num_classes=10) -> dict:
    return {arch.name: arch for arch in build_family(scale, input_shape, num_classes)}


def common_prefix_length(a: ModelArchitecture, b: ModelArchitecture) -> int:
    n = 0
    for sa, sb in zip(a.signatures, b.signatures):
        if sa != sb:
            break
        n += 1
    return n


@dataclass(frozen=True)
class CommonLayerSet:
    """One cluster of clients and the layers they share.

    ``common_indices[c]`` lists client ``c``'s layer positions that are
    aggregated with at least one other member; ``contributors[(c, j)]`` is the
    sorted tuple of client ids averaged together at client ``c``'s position
    ``j`` (its length is the contributor count).
    """

    cluster_id: str
    member_clients: tuple
    common_indices: dict
    contributors: dict

    def contributor_count(self, client_id: int, position: int) -> int:
        return len(self.contributors.get((client_id, position), (client_id,)))

    def groups(self):
        """Distinct ``(position, contributor tuple)`` pairs, in position order."""
        seen = sorted({(j, ids) for (_, j), ids in self.contributors.items()})
        return seen

    def depth(self, client_id: int) -> int:
        return len(self.common_indices.get(client_id, ()))


def extract_max_common_layers(models: Sequence) -> list:
    """Cluster ``(client_id, ModelArchitecture)`` pairs by shared leading layers.

    Two clients share position ``j`` only if their layer signatures agree at
    every position ``0..j``; the same layers in a different order therefore
    share nothing past the first mismatch. Clusters are returned sorted by
    their smallest client id.
    """
    models = list(models)
    if not models:
        raise InputError("need at least one client")
    ids = [cid for cid, _ in models]
    if len(set(ids)) != len(ids):
        raise InputError("duplicate client ids")
    sigs = {cid: arch.signatures for cid, arch in models}

    by_first = {}
    for cid in sorted(sigs):
        by_first.setdefault(sigs[cid][0], []).append(cid)

    clusters = []
    for members in by_first.values():
        common, contributors = {}, {}
        for cid in members:
            idx = []
            for j in range(len(sigs[cid])):
                group = tuple(m for m in members if sigs[m][: j + 1] == sigs[cid][: j + 1])
                if len(group) < 2:
                    break
                idx.append(j)
                contributors[(cid, j)] = group
            common[cid] = tuple(idx)
        clusters.append(
            CommonLayerSet(f"cluster-{members[0]}", tuple(members), common, contributors)
        )
    clusters.sort(key=lambda c: c.member_clients[0])
    return clusters


def group_by_architecture(models: Iterable) -> list:
    """Clients grouped by identical architecture, as FedAvg-style ``CommonLayerSet``s."""
    groups = {}
    archs = {}
    for cid, arch in sorted(models, key=lambda m: m[0]):
        groups.setdefault(arch.signatures, []).append(cid)
        archs[cid] = arch
    out = []
    for sig, members in groups.items():
        members = tuple(members)
        if len(members) > 1:
            common = {cid: tuple(range(len(sig))) for cid in members}
            contributors = {(cid, j): members for cid in members for j in range(len(sig))}
        else:
            common, contributors = {members[0]: ()}, {}
        out.append(CommonLayerSet(f"arch-{members[0]}", members, common, contributors))
    out.sort(key=lambda c: c.member_clients[0])
    return out


def heads_common(clusters: Sequence[CommonLayerSet], archs: dict) -> bool:
    """True if any client's classifier head falls inside its common set."""
    for cluster in clusters:
        for cid in cluster.member_clients:
            if len(archs[cid]) - 1 in cluster.common_indices.get(cid, ()):
                return True
    return False
