"""Per-take reconstructions, cross-take links, and the merged labeled scene.

Scene directory layout (ASCII, whitespace separated, ``#`` comments)::

    scene/take_<t>/cameras.txt   CAM <cam_id> <fx> <fy> <cx> <cy>
    scene/take_<t>/images.txt    IMG <img_id> <cam_id> <qw> <qx> <qy> <qz> <cx> <cy> <cz>
                                 OBS <px> <py> <n> {<take_id> <point_id>} x n
    scene/take_<t>/points.txt    PT <point_id> <x> <y> <z>
    scene/ground_truth.txt       GTL / GTM / GTS / GTI lines (optional)

Image ids are unique over the whole scene.
"""
from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .geometry import CameraPose, Intrinsics, RigidMotion, SimilarityTransform, quat_to_matrix

PointKey = Tuple[int, int]


class SceneFormatError(ValueError):
    """Malformed scene file; message carries ``file:line``."""


class ReferentialIntegrityError(ValueError):
    """A link, camera or image id points at something that does not exist."""


class Label(str, enum.Enum):
    B = "B"
    F = "F"
    U = "U"

    def swapped(self):
        return {Label.B: Label.F, Label.F: Label.B, Label.U: Label.U}[self]


def fmt(x) -> str:
    """Shortest exact text form of a float."""
    return repr(float(x))


@dataclass(frozen=True, eq=False)
class Observation:
    pixel: np.ndarray
    links: Tuple[PointKey, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "pixel", np.asarray(self.pixel, dtype=float).reshape(2))
        object.__setattr__(self, "links", tuple((int(t), int(p)) for t, p in self.links))
        takes = [t for t, _ in self.links]
        if len(set(takes)) != len(takes):
            raise ValueError(f"duplicate take ids in links {self.links}")

    @property
    def matched(self):
        return bool(self.links)

    def link_to(self, take) -> Optional[int]:
        for t, p in self.links:
            if t == take:
                return p
        return None

    def __eq__(self, other):
        return (isinstance(other, Observation) and self.links == other.links
                and np.array_equal(self.pixel, other.pixel))


@dataclass(frozen=True, eq=False)
class TakeModel:
    """Reconstruction of one take in its own coordinate system."""

    take_id: int
    points: Dict[int, np.ndarray]
    cameras: Dict[int, CameraPose]
    observations: Dict[int, List[Observation]]
    image_camera: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.cameras) < 2:
            raise ValueError(f"take {self.take_id} needs at least 2 cameras, has {len(self.cameras)}")
        if set(self.observations) - set(self.cameras):
            raise ReferentialIntegrityError(f"take {self.take_id}: observations for unknown images")

    @cached_property
    def point_ids(self) -> np.ndarray:
        return np.array(sorted(self.points), dtype=np.int64)

    @cached_property
    def point_array(self) -> np.ndarray:
        if not self.points:
            return np.zeros((0, 3))
        return np.array([self.points[p] for p in self.point_ids])

    def coords(self, ids):
        return np.array([self.points[int(p)] for p in ids]).reshape(-1, 3)

    def __eq__(self, other):
        if not isinstance(other, TakeModel) or self.take_id != other.take_id:
            return False
        if set(self.points) != set(other.points) or set(self.cameras) != set(other.cameras):
            return False
        if any(not np.array_equal(self.points[p], other.points[p]) for p in self.points):
            return False
        if any(self.cameras[j] != other.cameras[j] for j in self.cameras):
            return False
        return all(self.observations.get(j, []) == other.observations.get(j, []) for j in self.cameras)


@dataclass(frozen=True, eq=False)
class MultiTakeScene:
    takes: Tuple[TakeModel, ...]

    def __post_init__(self):
        takes = tuple(sorted(self.takes, key=lambda m: m.take_id))
        object.__setattr__(self, "takes", takes)
        ids = [m.take_id for m in takes]
        if len(set(ids)) != len(ids):
            raise ValueError("take ids must be unique")
        if len(ids) < 2:
            raise ValueError("a scene needs at least two takes")
        seen = {}
        for m in takes:
            for j in m.cameras:
                if j in seen:
                    raise ReferentialIntegrityError(f"image id {j} appears in takes {seen[j]} and {m.take_id}")
                seen[j] = m.take_id

    @property
    def k(self):
        return len(self.takes)

    @cached_property
    def take_ids(self) -> List[int]:
        return [m.take_id for m in self.takes]

    @cached_property
    def _by_id(self):
        return {m.take_id: m for m in self.takes}

    def take(self, t) -> TakeModel:
        return self._by_id[t]

    @cached_property
    def image_take(self) -> Dict[int, int]:
        return {j: m.take_id for m in self.takes for j in m.cameras}

    @cached_property
    def image_ids(self) -> List[int]:
        return sorted(self.image_take)

    def pose(self, j) -> CameraPose:
        return self.take(self.image_take[j]).cameras[j]

    def observations(self, j) -> List[Observation]:
        return self.take(self.image_take[j]).observations.get(j, [])

    def check_integrity(self):
        for m in self.takes:
            for j, obs in m.observations.items():
                for o in obs:
                    for t, p in o.links:
                        if t not in self._by_id:
                            raise ReferentialIntegrityError(f"image {j}: link to unknown take {t}")
                        if p not in self._by_id[t].points:
                            raise ReferentialIntegrityError(f"image {j}: dangling link to point {p} of take {t}")

    def __eq__(self, other):
        return isinstance(other, MultiTakeScene) and self.takes == other.takes


def correspondences(scene: MultiTakeScene, image_id: int, target_take: int):
    """2D-3D matches of one image against the model of ``target_take``.

    Returns a list of ``(pixel, point_id, observation_index)``.
    """
    if image_id not in scene.image_take:
        raise KeyError(f"unknown image id {image_id}")
    out = []
    for q, o in enumerate(scene.observations(image_id)):
        p = o.link_to(target_take)
        if p is not None:
            out.append((o.pixel, p, q))
    return out


@dataclass
class GroundTruth:
    """Simulator ground truth; ``scrambles[t]`` maps world to the frame of take t."""

    labels: Dict[PointKey, Label] = field(default_factory=dict)
    motions: Dict[int, RigidMotion] = field(default_factory=dict)
    scrambles: Dict[int, SimilarityTransform] = field(default_factory=dict)
    camera_poses: Dict[int, CameraPose] = field(default_factory=dict)
    point_identity: Dict[PointKey, int] = field(default_factory=dict)
    world_points: Optional[np.ndarray] = None
    world_labels: Optional[np.ndarray] = None
    warnings: List[str] = field(default_factory=list)


@dataclass
class LabeledScene:
    """Merged model in the frame of the reference take.

    ``points`` maps track id to ``(position, label)``; foreground points are
    stored in the reference configuration.  ``cameras`` maps image id to
    ``(background_pose, foreground_pose)``.  ``motions[t]`` moves the
    foreground from the reference configuration into that of take t.
    """

    reference: int
    points: Dict[int, Tuple[np.ndarray, Label]]
    cameras: Dict[int, Tuple[CameraPose, CameraPose]]
    image_take: Dict[int, int]
    motions: Dict[int, RigidMotion]
    observations: Dict[int, List[Tuple[np.ndarray, int]]]
    tracks: Dict[int, Tuple[PointKey, ...]] = field(default_factory=dict)
    excluded: List[int] = field(default_factory=list)
    degenerate: bool = False
    # (take, point) -> member position in the reference frame, own configuration
    member_positions: Dict[PointKey, np.ndarray] = field(default_factory=dict)

    def label_counts(self):
        counts = {Label.B: 0, Label.F: 0, Label.U: 0}
        for _, lab in self.points.values():
            counts[lab] += 1
        return counts


_TAKE_DIR = re.compile(r"^take_(-?\d+)$")


def _lines(path: Path):
    with open(path) as f:
        for n, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield n, line.split()


def _parse_error(path, n, msg):
    return SceneFormatError(f"{path}:{n}: {msg}")


def _floats(path, n, toks, count):
    if len(toks) != count:
        raise _parse_error(path, n, f"expected {count} numbers, got {len(toks)}")
    try:
        return [float(x) for x in toks]
    except ValueError as e:
        raise _parse_error(path, n, str(e)) from None


def _int(path, n, tok):
    try:
        return int(tok)
    except ValueError:
        raise _parse_error(path, n, f"expected integer, got {tok!r}") from None


def read_cameras(path: Path) -> Dict[int, Intrinsics]:
    cams = {}
    for n, toks in _lines(path):
        if toks[0] != "CAM" or len(toks) != 6:
            raise _parse_error(path, n, "expected 'CAM <id> <fx> <fy> <cx> <cy>'")
        fx, fy, cx, cy = _floats(path, n, toks[2:], 4)
        try:
            cams[_int(path, n, toks[1])] = Intrinsics(fx, fy, cx, cy)
        except ValueError as e:
            raise _parse_error(path, n, str(e)) from None
    return cams


def read_points(path: Path) -> Dict[int, np.ndarray]:
    pts = {}
    for n, toks in _lines(path):
        if toks[0] != "PT" or len(toks) != 5:
            raise _parse_error(path, n, "expected 'PT <id> <x> <y> <z>'")
        pid = _int(path, n, toks[1])
        if pid in pts:
            raise _parse_error(path, n, f"duplicate point id {pid}")
        pts[pid] = np.array(_floats(path, n, toks[2:], 3))
    return pts


def read_images(path: Path, intrinsics: Dict[int, Intrinsics]):
    cameras, observations, image_camera = {}, {}, {}
    current = None
    for n, toks in _lines(path):
        if toks[0] == "IMG":
            if len(toks) != 10:
                raise _parse_error(path, n, "expected 'IMG <id> <cam> <qw> <qx> <qy> <qz> <cx> <cy> <cz>'")
            j, cam = _int(path, n, toks[1]), _int(path, n, toks[2])
            if cam not in intrinsics:
                raise ReferentialIntegrityError(f"{path}:{n}: unknown camera id {cam}")
            if j in cameras:
                raise _parse_error(path, n, f"duplicate image id {j}")
            vals = _floats(path, n, toks[3:], 7)
            q = np.array(vals[:4])
            if not np.isfinite(q).all() or np.linalg.norm(q) == 0:
                raise _parse_error(path, n, "invalid quaternion")
            cameras[j] = CameraPose.from_quaternion(intrinsics[cam], q, vals[4:])
            image_camera[j] = cam
            observations[j] = []
            current = j
        elif toks[0] == "OBS":
            if current is None:
                raise _parse_error(path, n, "OBS before any IMG")
            if len(toks) < 4:
                raise _parse_error(path, n, "expected 'OBS <px> <py> <n> ...'")
            px, py = _floats(path, n, toks[1:3], 2)
            k = _int(path, n, toks[3])
            if k < 0 or len(toks) != 4 + 2 * k:
                raise _parse_error(path, n, f"OBS declares {k} links but has {len(toks) - 4} fields")
            links = [(_int(path, n, toks[4 + 2 * i]), _int(path, n, toks[5 + 2 * i])) for i in range(k)]
            try:
                observations[current].append(Observation((px, py), links))
            except ValueError as e:
                raise _parse_error(path, n, str(e)) from None
        else:
            raise _parse_error(path, n, f"unknown record {toks[0]!r}")
    return cameras, observations, image_camera


def load_take(path: Path, take_id: int) -> TakeModel:
    path = Path(path)
    for name in ("cameras.txt", "images.txt", "points.txt"):
        if not (path / name).is_file():
            raise SceneFormatError(f"{path / name}: missing file")
    intr = read_cameras(path / "cameras.txt")
    cameras, observations, image_camera = read_images(path / "images.txt", intr)
    points = read_points(path / "points.txt")
    try:
        model = TakeModel(take_id, points, cameras, observations, image_camera)
    except ReferentialIntegrityError:
        raise
    except ValueError as e:
        raise SceneFormatError(f"{path}: {e}") from None
    return model


def load_scene(path) -> MultiTakeScene:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"scene directory {path} does not exist")
    takes = []
    for d in sorted(path.iterdir()):
        m = _TAKE_DIR.match(d.name)
        if m and d.is_dir():
            takes.append(load_take(d, int(m.group(1))))
    if not takes:
        raise SceneFormatError(f"{path}: no takes found")
    try:
        scene = MultiTakeScene(tuple(takes))
    except ReferentialIntegrityError:
        raise
    except ValueError as e:
        raise SceneFormatError(f"{path}: {e}") from None
    scene.check_integrity()
    return scene


def _intrinsics_table(model: TakeModel):
    """Camera table for writing; reuses stored camera ids when present."""
    table, image_camera = {}, {}
    by_value = {}
    for j in sorted(model.cameras):
        intr = model.cameras[j].intrinsics
        cam = model.image_camera.get(j)
        if cam is None:
            cam = by_value.get(intr)
            if cam is None:
                cam = len(by_value) + 1
                while cam in table:
                    cam += 1
        by_value.setdefault(intr, cam)
        table[cam] = intr
        image_camera[j] = cam
    return table, image_camera


def format_pose(pose: CameraPose) -> str:
    return " ".join(fmt(v) for v in (*pose.quaternion, *pose.center))


def save_take(model: TakeModel, path: Path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    table, image_camera = _intrinsics_table(model)
    with open(path / "cameras.txt", "w") as f:
        f.write("# CAM <cam_id> <fx> <fy> <cx> <cy>\n")
        for cam in sorted(table):
            k = table[cam]
            f.write(f"CAM {cam} {fmt(k.fx)} {fmt(k.fy)} {fmt(k.cx)} {fmt(k.cy)}\n")
    with open(path / "images.txt", "w") as f:
        f.write("# IMG <img_id> <cam_id> <qw> <qx> <qy> <qz> <cx> <cy> <cz>\n")
        f.write("# OBS <px> <py> <n> {<take_id> <point_id>} x n\n")
        for j in sorted(model.cameras):
            f.write(f"IMG {j} {image_camera[j]} {format_pose(model.cameras[j])}\n")
            for o in model.observations.get(j, []):
                links = "".join(f" {t} {p}" for t, p in o.links)
                f.write(f"OBS {fmt(o.pixel[0])} {fmt(o.pixel[1])} {len(o.links)}{links}\n")
    with open(path / "points.txt", "w") as f:
        f.write("# PT <point_id> <x> <y> <z>\n")
        for p in sorted(model.points):
            x = model.points[p]
            f.write(f"PT {p} {fmt(x[0])} {fmt(x[1])} {fmt(x[2])}\n")


def save_scene(scene: MultiTakeScene, path, ground_truth: Optional[GroundTruth] = None):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for m in scene.takes:
        save_take(m, path / f"take_{m.take_id}")
    if ground_truth is not None:
        save_ground_truth(ground_truth, path / "ground_truth.txt")


def _motion_fields(R, t):
    from .geometry import matrix_to_quat
    return " ".join(fmt(v) for v in (*matrix_to_quat(R), *t))


def save_ground_truth(gt: GroundTruth, path):
    with open(path, "w") as f:
        f.write("# GTL <take_id> <point_id> <B|F>\n")
        f.write("# GTM <take_id> <qw qx qy qz tx ty tz>   foreground motion from the initial configuration\n")
        f.write("# GTS <take_id> <qw qx qy qz tx ty tz scale>   world -> take frame\n")
        f.write("# GTI <take_id> <point_id> <physical_id>\n")
        for (t, p), lab in sorted(gt.labels.items()):
            f.write(f"GTL {t} {p} {lab.value}\n")
        for t, m in sorted(gt.motions.items()):
            f.write(f"GTM {t} {_motion_fields(m.rotation, m.translation)}\n")
        for t, s in sorted(gt.scrambles.items()):
            f.write(f"GTS {t} {_motion_fields(s.rotation, s.translation)} {fmt(s.scale)}\n")
        for (t, p), i in sorted(gt.point_identity.items()):
            f.write(f"GTI {t} {p} {i}\n")


def load_ground_truth(path) -> GroundTruth:
    path = Path(path)
    gt = GroundTruth()
    for n, toks in _lines(path):
        tag = toks[0]
        if tag == "GTL" and len(toks) == 4:
            if toks[3] not in ("B", "F"):
                raise _parse_error(path, n, f"label must be B or F, got {toks[3]!r}")
            gt.labels[(_int(path, n, toks[1]), _int(path, n, toks[2]))] = Label(toks[3])
        elif tag == "GTM" and len(toks) == 9:
            v = _floats(path, n, toks[2:], 7)
            gt.motions[_int(path, n, toks[1])] = RigidMotion(quat_to_matrix(v[:4]), v[4:])
        elif tag == "GTS" and len(toks) == 10:
            v = _floats(path, n, toks[2:], 8)
            gt.scrambles[_int(path, n, toks[1])] = SimilarityTransform(quat_to_matrix(v[:4]), v[4:7], v[7])
        elif tag == "GTI" and len(toks) == 4:
            gt.point_identity[(_int(path, n, toks[1]), _int(path, n, toks[2]))] = _int(path, n, toks[3])
        else:
            raise _parse_error(path, n, f"malformed ground-truth record {tag!r}")
    return gt
