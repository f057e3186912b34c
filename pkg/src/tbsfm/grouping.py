"""Two-way grouping of each take's points by linking pose pairs across cameras."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import CameraPose, RigidMotion, rotation_geodesic_distance
from .registration import RegisteredPose

log = logging.getLogger(__name__)

THRESHOLD_FRACTION = 0.02
ZERO_ROTATION = 1e-2
ZERO_TRANSLATION = 1e-2
CLUSTER_ROTATION = 0.05
CLUSTER_TRANSLATION = 0.02
DEGENERATE_FRACTION = 0.02

FORWARD, BACKWARD, ZERO, OUTLIER = "forward", "backward", "zero", "outlier"


@dataclass(frozen=True)
class PosePair:
    image: int
    take: int
    first: RegisteredPose
    second: RegisteredPose
    support: int = 1

    @property
    def observed(self) -> Tuple[FrozenSet[int], FrozenSet[int]]:
        return self.first.point_ids, self.second.point_ids


@dataclass(frozen=True)
class TakeGroupPair:
    take: int
    groups: Tuple[FrozenSet[int], FrozenSet[int]]
    support: int
    degenerate: bool = False

    @property
    def size(self):
        return len(self.groups[0]) + len(self.groups[1])


def foreground_motion_from_pair(pose_b: CameraPose, pose_f: CameraPose) -> RigidMotion:
    """Object motion implied by two poses of one physical camera.

    Moving the points seen through ``pose_f`` by the result makes them
    consistent with ``pose_b``.
    """
    A = pose_b.rotation.T @ pose_f.rotation
    return RigidMotion(A, pose_b.center - A @ pose_f.center)


def extract_pose_pairs(poses_by_image: Dict[int, Sequence[RegisteredPose]]) -> List[PosePair]:
    """All 2-combinations of each image's sequential poses, strongest first."""
    pairs = []
    for j in sorted(poses_by_image):
        poses = sorted(poses_by_image[j], key=lambda p: -p.n_inliers)
        for a, b in itertools.combinations(poses, 2):
            pairs.append(PosePair(j, a.take, a, b))
    return pairs


def scene_scale(points) -> float:
    points = np.asarray(points, dtype=float)
    if len(points) == 0:
        return 1.0
    return float(np.linalg.norm(points.max(axis=0) - points.min(axis=0))) or 1.0


def _is_zero(m: RigidMotion, scale):
    angle = rotation_geodesic_distance(np.eye(3), m.rotation)
    return angle < ZERO_ROTATION and np.linalg.norm(m.translation) < ZERO_TRANSLATION * scale


def motion_cluster(motions: Sequence[RigidMotion], scale) -> Optional[List[str]]:
    """Tag motions as forward, backward, zero or outlier.

    Zero motions are split off by a magnitude threshold; the rest are
    clustered by exhaustive sequential RANSAC where every motion is tried as
    a hypothesis.  Returns ``None`` (criterion disabled) when fewer than two
    motions are non-zero.
    """
    tags = [ZERO if _is_zero(m, scale) else OUTLIER for m in motions]
    left = [i for i, tag in enumerate(tags) if tag != ZERO]
    if len(left) < 2:
        return None
    clusters = []
    while left:
        best = None
        for i in left:
            members = [k for k in left
                       if rotation_geodesic_distance(motions[i].rotation, motions[k].rotation) < CLUSTER_ROTATION
                       and np.linalg.norm(motions[i].translation - motions[k].translation)
                       < CLUSTER_TRANSLATION * scale]
            if best is None or len(members) > len(best):
                best = members
        clusters.append(best)
        left = [k for k in left if k not in best]
    clusters.sort(key=lambda c: (-len(c), c[0]))
    for tag, members in zip((FORWARD, BACKWARD), clusters[:2]):
        for k in members:
            tags[k] = tag
    return tags


class _Linkage:
    """Working state of the linkage: vote counts per pair and group.

    ``votes[i, g, p]`` counts the cameras that placed point column ``p`` in
    group ``g`` of pair ``i``; membership is ``votes > 0``, which makes
    merging a set union while keeping track of disagreements.
    """

    def __init__(self, pairs: Sequence[PosePair], tags=None):
        cols = sorted(set().union(*(o for p in pairs for o in p.observed)))
        self.columns = np.array(cols, dtype=np.int64)
        index = {p: k for k, p in enumerate(cols)}
        self.votes = np.zeros((len(pairs), 2, len(cols)), dtype=np.int64)
        for i, pair in enumerate(pairs):
            for g, obs in enumerate(pair.observed):
                self.votes[i, g, [index[p] for p in obs]] = 1
        self.support = [p.support for p in pairs]
        # per pair: source take -> motion cluster tag, for the optional filter
        self.tags = [dict(t) for t in tags] if tags is not None else None

    def __len__(self):
        return len(self.support)

    def _scores(self):
        M = (self.votes > 0).astype(np.int64)
        M1, M2 = M[:, 0], M[:, 1]
        I11, I22, I12, I21 = M1 @ M1.T, M2 @ M2.T, M1 @ M2.T, M2 @ M1.T
        n1, n2 = M1.sum(axis=1), M2.sum(axis=1)

        def theta(a, b):
            return THRESHOLD_FRACTION * np.minimum(a[:, None], b[None, :])

        straight = I11 + I22
        cross = I12 + I21
        ok_straight = (I12 < theta(n1, n2)) & (I21 < theta(n2, n1)) & (straight > 0)
        ok_cross = (I11 < theta(n1, n1)) & (I22 < theta(n2, n2)) & (cross > 0)
        upper = np.triu(np.ones_like(straight, dtype=bool), k=1)
        ok_straight &= upper
        ok_cross &= upper
        if self.tags is not None:
            for i, j in zip(*np.nonzero(ok_straight | ok_cross)):
                same, opposite = self._tag_relation(i, j)
                if not same:
                    ok_straight[i, j] = False
                if not opposite:
                    ok_cross[i, j] = False
        return straight, ok_straight, cross, ok_cross

    def _tag_relation(self, i, j):
        """Whether pairs i and j may merge straight, and whether crossed."""
        same = opposite = True
        for s, a in self.tags[i].items():
            b = self.tags[j].get(s)
            if b is None:
                continue
            if ZERO in (a, b) or OUTLIER in (a, b):
                return False, False
            same &= a == b
            opposite &= a != b
        return same, opposite

    @staticmethod
    def _argmax(score, ok):
        if not ok.any():
            return None, -1
        masked = np.where(ok, score, -1)
        flat = int(np.argmax(masked))  # first maximum = smallest (i, j) in row-major order
        i, j = divmod(flat, score.shape[1])
        return (i, j), int(masked[i, j])

    def step(self):
        """Merge the best admissible pair; returns False when none is left."""
        if len(self) < 2:
            return False
        straight, ok_s, cross, ok_c = self._scores()
        ij_s, best_s = self._argmax(straight, ok_s)
        ij_c, best_c = self._argmax(cross, ok_c)
        if ij_s is None and ij_c is None:
            return False
        crossed = ij_s is None or (ij_c is not None and best_c > best_s)
        i, j = ij_c if crossed else ij_s
        other = self.votes[j, ::-1] if crossed else self.votes[j]
        self.votes[i] += other
        self.support[i] += self.support[j]
        if self.tags is not None:
            flip = {FORWARD: BACKWARD, BACKWARD: FORWARD}
            for s, tag in self.tags[j].items():
                self.tags[i].setdefault(s, flip.get(tag, tag) if crossed else tag)
            del self.tags[j]
        self.votes = np.delete(self.votes, j, axis=0)
        del self.support[j]
        return True

    def groups(self, i):
        v1, v2 = self.votes[i]
        return (frozenset(self.columns[v1 > v2].tolist()), frozenset(self.columns[v2 > v1].tolist()))


def _canonical(pairs):
    return sorted(pairs, key=lambda p: (p.image, tuple(sorted(p.observed[0])), tuple(sorted(p.observed[1]))))


def linkage(pairs: Sequence[PosePair], tags=None) -> List[Tuple[Tuple[FrozenSet[int], FrozenSet[int]], int]]:
    """Run linkage to its fixpoint; returns ``(groups, support)`` per surviving pair."""
    state = _Linkage(pairs, tags)
    while state.step():
        pass
    return [(state.groups(i), state.support[i]) for i in range(len(state))]


def group_take(take, pairs: Sequence[PosePair], source_take=None, motion_scale=None) -> Optional[TakeGroupPair]:
    """Group one take's points from its pose pairs; ``None`` if there are no pairs.

    ``source_take`` maps image id to its own take and, together with
    ``motion_scale``, enables the motion-cluster admissibility filter.
    """
    if not pairs:
        log.warning("take %s: no pose pairs, grouping failed", take)
        return None
    pairs = _canonical(pairs)
    tags = None
    if source_take is not None and motion_scale is not None:
        tags = _motion_tags(pairs, source_take, motion_scale)
    survivors = linkage(pairs, tags)
    best = max(range(len(survivors)),
               key=lambda k: (survivors[k][1], len(survivors[k][0][0] | survivors[k][0][1]), -k))
    (g1, g2), support = survivors[best]
    degenerate = min(len(g1), len(g2)) < DEGENERATE_FRACTION * (len(g1) + len(g2))
    if degenerate:
        log.warning("take %s: degenerate grouping (%d / %d points)", take, len(g1), len(g2))
    return TakeGroupPair(take, (g1, g2), support, degenerate)


def _motion_tags(pairs, source_take, scale):
    by_source = {}
    for k, p in enumerate(pairs):
        by_source.setdefault(source_take[p.image], []).append(k)
    tags = [{} for _ in pairs]
    for s, idx in sorted(by_source.items()):
        motions = [foreground_motion_from_pair(pairs[k].first.pose, pairs[k].second.pose) for k in idx]
        labels = motion_cluster(motions, scale)
        if labels is None:
            log.info("motion criterion disabled for takes %s->%s", s, pairs[idx[0]].take)
            continue
        for k, tag in zip(idx, labels):
            tags[k][s] = tag
    return tags


def group_all(scene, registrations, motion_criterion=False) -> Dict[int, Optional[TakeGroupPair]]:
    """TakeGroupPair (or ``None`` on failure) for every take."""
    out = {}
    for t in scene.take_ids:
        per_image = {j: poses for (j, tt), poses in registrations.items() if tt == t}
        pairs = extract_pose_pairs(per_image)
        scale = scene_scale(scene.take(t).point_array) if motion_criterion else None
        out[t] = group_take(t, pairs, scene.image_take if motion_criterion else None, scale)
    return out
