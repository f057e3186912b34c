"""Global two-way partition of tracks and B/F/U labeling."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Sequence, Tuple

import numpy as np
from scipy.spatial import cKDTree

from .geometry import RigidMotion
from .grouping import THRESHOLD_FRACTION, TakeGroupPair
from .scene import Label, PointKey
from .tracks import Track

log = logging.getLogger(__name__)

DEFAULT_K = 10


@dataclass
class GlobalGroups:
    reference: int
    groups: Tuple[FrozenSet[int], FrozenSet[int]]
    order: List[int]
    crossed: Dict[int, bool] = field(default_factory=dict)
    unmerged: List[int] = field(default_factory=list)


def lift_to_tracks(pair: TakeGroupPair, index: Mapping[PointKey, int]) -> Tuple[FrozenSet[int], FrozenSet[int]]:
    """Replace point ids by track ids; contested tracks go to the majority set."""
    claims = [Counter(index[(pair.take, p)] for p in g) for g in pair.groups]
    tracks = set(claims[0]) | set(claims[1])
    first = frozenset(tr for tr in tracks if claims[0][tr] > claims[1][tr])
    second = frozenset(tr for tr in tracks if claims[1][tr] > claims[0][tr])
    return first, second


def choose_reference(pairs: Mapping[int, TakeGroupPair]) -> int:
    """Take with the most supporting cameras; larger union, then smaller id break ties."""
    return min(pairs, key=lambda t: (-pairs[t].support, -pairs[t].size, t))


def _criterion(g1, g2, t1, t2):
    """Best admissible (value, crossed) for merging (t1, t2) into (g1, g2), or None."""
    i11, i22, i12, i21 = len(g1 & t1), len(g2 & t2), len(g1 & t2), len(g2 & t1)

    def theta(a, b):
        return THRESHOLD_FRACTION * min(len(a), len(b))

    options = []
    if i12 < theta(g1, t2) and i21 < theta(g2, t1) and i11 + i22 > 0:
        options.append((i11 + i22, False))
    if i11 < theta(g1, t1) and i22 < theta(g2, t2) and i12 + i21 > 0:
        options.append((i12 + i21, True))
    if not options:
        return None
    # straight wins ties
    return max(options, key=lambda o: (o[0], not o[1]))


def merge_global(lifted: Mapping[int, Tuple[FrozenSet[int], FrozenSet[int]]],
                 pairs: Mapping[int, TakeGroupPair]) -> GlobalGroups:
    """Greedily merge per-take track groups, starting from the reference take."""
    if not lifted:
        raise ValueError("no grouped takes to merge")
    r = choose_reference({t: pairs[t] for t in lifted})
    votes = [Counter(lifted[r][0]), Counter(lifted[r][1])]

    def current():
        tracks = set(votes[0]) | set(votes[1])
        return (frozenset(x for x in tracks if votes[0][x] > votes[1][x]),
                frozenset(x for x in tracks if votes[1][x] > votes[0][x]))

    order, crossed = [r], {r: False}
    remaining = sorted(t for t in lifted if t != r)
    while remaining:
        g1, g2 = current()
        best = None
        for t in remaining:
            t1, t2 = lifted[t]
            crit = _criterion(g1, g2, t1, t2)
            if crit is None:
                continue
            key = (crit[0], len(t1 | t2), -t)
            if best is None or key > best[0]:
                best = (key, t, crit[1])
        if best is None:
            break
        _, t, flip = best
        t1, t2 = lifted[t]
        if flip:
            t1, t2 = t2, t1
        votes[0].update(t1)
        votes[1].update(t2)
        order.append(t)
        crossed[t] = flip
        remaining.remove(t)
    if remaining:
        log.warning("takes left unmerged by segmentation: %s", remaining)
    return GlobalGroups(r, current(), order, crossed, remaining)


def label_points(groups: GlobalGroups, tracks: Sequence[Track], swap=False) -> Dict[int, Label]:
    """First global group is background, second foreground, the rest unknown."""
    g1, g2 = groups.groups
    out = {}
    for tr in tracks:
        lab = Label.B if tr.track_id in g1 else Label.F if tr.track_id in g2 else Label.U
        out[tr.track_id] = lab.swapped() if swap else lab
    return out


def knn_propagate(labels: Mapping[int, Label], rest_positions: Mapping[int, np.ndarray],
                  member_positions: Mapping[PointKey, np.ndarray], tracks: Sequence[Track],
                  motions: Mapping[int, RigidMotion], k=DEFAULT_K) -> Dict[int, Label]:
    """Label U tracks whose k nearest labeled neighbours agree unanimously.

    Every member of a U track is queried in the configuration of its own
    take: the labeled cloud there holds B points at rest and F points moved
    by that take's motion.  All members must agree.  One pass, labels frozen.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    out = dict(labels)
    labeled = sorted(tid for tid, lab in labels.items() if lab != Label.U and tid in rest_positions)
    if len(labeled) < k:
        log.warning("only %d labeled points for k=%d, propagation skipped", len(labeled), k)
        return out
    base = np.array([rest_positions[tid] for tid in labeled])
    is_f = np.array([labels[tid] == Label.F for tid in labeled])
    lab_arr = np.array([labels[tid] for tid in labeled], dtype=object)
    trees = {}
    for t in sorted(motions):
        cloud = base.copy()
        if is_f.any():
            cloud[is_f] = motions[t].apply(base[is_f])
        trees[t] = cKDTree(cloud)
    changed = 0
    for tr in tracks:
        if labels.get(tr.track_id) != Label.U:
            continue
        votes = set()
        for m in tr.members:
            if m not in member_positions or m[0] not in trees:
                continue
            _, idx = trees[m[0]].query(member_positions[m], k=k)
            votes.update(lab_arr[np.atleast_1d(idx)].tolist())
            if len(votes) > 1:
                break
        if len(votes) == 1:
            out[tr.track_id] = votes.pop()
            changed += 1
    log.info("kNN propagation labeled %d tracks", changed)
    return out
