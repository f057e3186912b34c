"""Cross-take point identity graph and its connected components (tracks)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Iterable, List, Set, Tuple

from .scene import MultiTakeScene, PointKey


@dataclass(frozen=True)
class TrackGraph:
    vertices: Tuple[PointKey, ...]
    edges: frozenset  # of (PointKey, PointKey) with the smaller key first

    def neighbors(self) -> Dict[PointKey, Set[PointKey]]:
        adj = {v: set() for v in self.vertices}
        for a, b in self.edges:
            adj[a].add(b)
            adj[b].add(a)
        return adj


@dataclass(frozen=True)
class Track:
    track_id: int
    members: Tuple[PointKey, ...]

    def member_in(self, take) -> List[int]:
        return [p for t, p in self.members if t == take]


def _verified_links(scene: MultiTakeScene, registrations):
    """Per image: the set of (obs_index, take, point) links confirmed by an inlier."""
    confirmed = {}
    if registrations is None:
        return None
    for (j, t), poses in registrations.items():
        s = confirmed.setdefault(j, set())
        for pose in poses:
            s.update((q, t, p) for p, q in pose.inliers)
    return confirmed


def build_graph(scene: MultiTakeScene, registrations=None) -> TrackGraph:
    """Link points of different takes that explain the same observation.

    A link of an observation counts if it points into the image's own take or
    was an inlier of a registered pose of that image toward the linked take.
    With ``registrations=None`` every link counts.
    """
    vertices = tuple((t, int(p)) for t in scene.take_ids for p in scene.take(t).point_ids)
    confirmed = _verified_links(scene, registrations)
    edges = set()
    for j in scene.image_ids:
        own = scene.image_take[j]
        ok = confirmed.get(j, set()) if confirmed is not None else None
        for q, obs in enumerate(scene.observations(j)):
            links = [(t, p) for t, p in obs.links
                     if ok is None or t == own or (q, t, p) in ok]
            for a in range(len(links)):
                for b in range(a + 1, len(links)):
                    u, v = sorted((links[a], links[b]))
                    if u[0] != v[0]:
                        edges.add((u, v))
    return TrackGraph(vertices, frozenset(edges))


class UnionFind:
    def __init__(self, items: Iterable):
        self.parent = {x: x for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # the smaller root wins so results never depend on edge order
            if rb < ra:
                ra, rb = rb, ra
            self.parent[rb] = ra


def connected_components(graph: TrackGraph) -> List[Track]:
    """Tracks numbered from 1 in order of their smallest (take, point) member."""
    uf = UnionFind(graph.vertices)
    for a, b in graph.edges:
        uf.union(a, b)
    comps: Dict[PointKey, List[PointKey]] = {}
    for v in graph.vertices:
        comps.setdefault(uf.find(v), []).append(v)
    ordered = sorted(tuple(sorted(m)) for m in comps.values())
    return [Track(i + 1, m) for i, m in enumerate(ordered)]


def build_tracks(scene: MultiTakeScene, registrations=None) -> List[Track]:
    return connected_components(build_graph(scene, registrations))


def track_index(tracks: Iterable[Track]) -> Dict[PointKey, int]:
    """Map every (take, point) to its track id."""
    return {m: tr.track_id for tr in tracks for m in tr.members}
