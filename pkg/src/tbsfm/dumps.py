"""Text dumps passed between pipeline stages.

Every float is written with ``repr`` so a dump read back reproduces the
in-memory values bit for bit.
"""
from __future__ import annotations

from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .geometry import CameraPose, RigidMotion, matrix_to_quat, matrix_to_rotvec, quat_to_matrix
from .grouping import TakeGroupPair
from .merging import foreground_pose
from .registration import RegisteredPose
from .scene import (Label, LabeledScene, MultiTakeScene, Observation, SceneFormatError, TakeModel, fmt,
                    format_pose, load_take, save_take)
from .tracks import Track


def _records(path):
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{path} does not exist")
    with open(path) as f:
        for n, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if line:
                yield n, line.split()


def _bad(path, n, msg):
    return SceneFormatError(f"{path}:{n}: {msg}")


# registrations

def write_registrations(regs: Mapping[Tuple[int, int], Sequence[RegisteredPose]], path):
    with open(path, "w") as f:
        f.write("# REG <image> <take> <pose_index> <qw qx qy qz cx cy cz> <n_inliers>\n")
        f.write("# INL {<point_id> <observation_index>} x n_inliers\n")
        for (j, t) in sorted(regs):
            for k, rp in enumerate(regs[(j, t)]):
                f.write(f"REG {j} {t} {k} {format_pose(rp.pose)} {rp.n_inliers}\n")
                f.write("INL" + "".join(f" {p} {q}" for p, q in rp.inliers) + "\n")


def read_registrations(path, scene: MultiTakeScene) -> Dict[Tuple[int, int], List[RegisteredPose]]:
    out: Dict[Tuple[int, int], List[RegisteredPose]] = {}
    pending = None
    for n, tok in _records(path):
        try:
            if tok[0] == "REG" and len(tok) == 12:
                j, t = int(tok[1]), int(tok[2])
                vals = [float(v) for v in tok[4:11]]
                if j not in scene.image_take:
                    raise _bad(path, n, f"unknown image {j}")
                pose = CameraPose.from_quaternion(scene.pose(j).intrinsics, vals[:4], vals[4:])
                pending = (j, t, pose, int(tok[11]))
            elif tok[0] == "INL" and pending is not None:
                j, t, pose, count = pending
                vals = [int(v) for v in tok[1:]]
                if len(vals) != 2 * count:
                    raise _bad(path, n, f"expected {count} inliers")
                inl = tuple(zip(vals[0::2], vals[1::2]))
                out.setdefault((j, t), []).append(RegisteredPose(j, t, pose, inl))
                pending = None
            else:
                raise _bad(path, n, f"unexpected record {tok[0]!r}")
        except ValueError as e:
            if isinstance(e, SceneFormatError):
                raise
            raise _bad(path, n, str(e)) from None
    return out


# groups

def write_groups(groups: Mapping[int, Optional[TakeGroupPair]], path, motions=None):
    with open(path, "w") as f:
        f.write("# SUP <take> <support> <degenerate 0|1>;  FAIL <take>\n")
        f.write("# GRP <take> <group 1|2> <n> <point ids...>\n")
        for t in sorted(groups):
            g = groups[t]
            if g is None:
                f.write(f"FAIL {t}\n")
                continue
            f.write(f"SUP {t} {g.support} {int(g.degenerate)}\n")
            for k, members in enumerate(g.groups, 1):
                f.write(f"GRP {t} {k} {len(members)}" + "".join(f" {p}" for p in sorted(members)) + "\n")
        for s, t, m in motions or ():
            vals = (*matrix_to_rotvec(m.rotation), *m.translation)
            f.write(f"MOT {s} {t} " + " ".join(fmt(v) for v in vals) + "\n")


def read_groups(path) -> Dict[int, Optional[TakeGroupPair]]:
    sup, sets, failed = {}, {}, []
    for n, tok in _records(path):
        if tok[0] == "SUP" and len(tok) == 4:
            sup[int(tok[1])] = (int(tok[2]), tok[3] == "1")
        elif tok[0] == "GRP" and len(tok) >= 4:
            t, k, cnt = int(tok[1]), int(tok[2]), int(tok[3])
            if len(tok) != 4 + cnt or k not in (1, 2):
                raise _bad(path, n, "malformed GRP record")
            sets.setdefault(t, [frozenset(), frozenset()])[k - 1] = frozenset(int(v) for v in tok[4:])
        elif tok[0] == "FAIL" and len(tok) == 2:
            failed.append(int(tok[1]))
        elif tok[0] == "MOT":
            continue
        else:
            raise _bad(path, n, f"unexpected record {tok[0]!r}")
    out: Dict[int, Optional[TakeGroupPair]] = {t: None for t in failed}
    for t, (support, degenerate) in sup.items():
        g1, g2 = sets.get(t, [frozenset(), frozenset()])
        out[t] = TakeGroupPair(t, (g1, g2), support, degenerate)
    return dict(sorted(out.items()))


# tracks

def write_tracks(tracks: Sequence[Track], path):
    with open(path, "w") as f:
        f.write("# TRK <track_id> <n> {<take_id> <point_id>} x n\n")
        for tr in tracks:
            f.write(f"TRK {tr.track_id} {len(tr.members)}" + "".join(f" {t} {p}" for t, p in tr.members) + "\n")


def read_tracks(path) -> List[Track]:
    out = []
    for n, tok in _records(path):
        if tok[0] != "TRK" or len(tok) < 3:
            raise _bad(path, n, "expected 'TRK <id> <n> ...'")
        cnt = int(tok[2])
        vals = [int(v) for v in tok[3:]]
        if len(vals) != 2 * cnt:
            raise _bad(path, n, f"track declares {cnt} members")
        out.append(Track(int(tok[1]), tuple(zip(vals[0::2], vals[1::2]))))
    return out


# labels

def write_labels(labels: Mapping[int, Label], path, reference=None, order=(), unmerged=(), degenerate=False):
    with open(path, "w") as f:
        f.write("# REF <take>; ORD <takes in merge order>; UNM <unmerged takes>; DEG <0|1>\n")
        f.write("# LBL <track_id> <B|F|U>\n")
        if reference is not None:
            f.write(f"REF {reference}\n")
            f.write("ORD" + "".join(f" {t}" for t in order) + "\n")
            f.write("UNM" + "".join(f" {t}" for t in unmerged) + "\n")
        f.write(f"DEG {int(degenerate)}\n")
        for tid in sorted(labels):
            f.write(f"LBL {tid} {labels[tid].value}\n")


def read_labels(path):
    """``(labels, reference, order, unmerged, degenerate)``."""
    labels, reference, order, unmerged, degenerate = {}, None, [], [], False
    for n, tok in _records(path):
        if tok[0] == "LBL" and len(tok) == 3:
            if tok[2] not in ("B", "F", "U"):
                raise _bad(path, n, f"bad label {tok[2]!r}")
            labels[int(tok[1])] = Label(tok[2])
        elif tok[0] == "REF" and len(tok) == 2:
            reference = int(tok[1])
        elif tok[0] == "ORD":
            order = [int(v) for v in tok[1:]]
        elif tok[0] == "UNM":
            unmerged = [int(v) for v in tok[1:]]
        elif tok[0] == "DEG" and len(tok) == 2:
            degenerate = tok[1] == "1"
        else:
            raise _bad(path, n, f"unexpected record {tok[0]!r}")
    return labels, reference, order, unmerged, degenerate


# merged result

def save_result(scene: LabeledScene, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    r = scene.reference
    cams = {j: scene.cameras[j][0] for j in sorted(scene.cameras)}
    obs = {j: [Observation(px, [(r, tid)]) for px, tid in scene.observations.get(j, [])] for j in cams}
    model = TakeModel(r, {tid: p for tid, (p, _) in scene.points.items()}, cams, obs)
    save_take(model, out / "merged")
    write_labels({tid: lab for tid, (_, lab) in scene.points.items()}, out / "labels.txt")
    write_tracks([Track(tid, scene.tracks[tid]) for tid in sorted(scene.tracks)], out / "tracks.txt")
    with open(out / "motions.txt", "w") as f:
        f.write("# FGM <take_id> <qw qx qy qz tx ty tz>\n")
        for t in sorted(scene.motions):
            m = scene.motions[t]
            f.write(f"FGM {t} " + " ".join(fmt(v) for v in (*matrix_to_quat(m.rotation), *m.translation)) + "\n")
    with open(out / "image_takes.txt", "w") as f:
        f.write("# ITK <image_id> <take_id>\n")
        for j in sorted(scene.image_take):
            f.write(f"ITK {j} {scene.image_take[j]}\n")
    with open(out / "meta.txt", "w") as f:
        f.write(f"REF {r}\n")
        f.write("EXCLUDED" + "".join(f" {t}" for t in scene.excluded) + "\n")
        f.write(f"DEGENERATE {int(scene.degenerate)}\n")


def load_result(path) -> LabeledScene:
    path = Path(path)
    if not path.is_dir():
        raise FileNotFoundError(f"result directory {path} does not exist")
    meta = {tok[0]: tok[1:] for _, tok in _records(path / "meta.txt")}
    if "REF" not in meta:
        raise SceneFormatError(f"{path / 'meta.txt'}: missing REF record")
    r = int(meta["REF"][0])
    model = load_take(path / "merged", r)
    labels, *_ = read_labels(path / "labels.txt")
    motions = {}
    for n, tok in _records(path / "motions.txt"):
        if tok[0] != "FGM" or len(tok) != 9:
            raise _bad(path / "motions.txt", n, "expected 'FGM <take> <7 numbers>'")
        v = [float(x) for x in tok[2:]]
        motions[int(tok[1])] = RigidMotion(quat_to_matrix(v[:4]), v[4:])
    image_take = {}
    for n, tok in _records(path / "image_takes.txt"):
        if tok[0] != "ITK" or len(tok) != 3:
            raise _bad(path / "image_takes.txt", n, "expected 'ITK <image> <take>'")
        image_take[int(tok[1])] = int(tok[2])
    tracks = {tr.track_id: tr.members for tr in read_tracks(path / "tracks.txt")}
    points = {tid: (x, labels.get(tid, Label.U)) for tid, x in model.points.items()}
    cameras = {}
    for j, bg in model.cameras.items():
        if j not in image_take or image_take[j] not in motions:
            raise SceneFormatError(f"{path}: image {j} has no take or motion")
        cameras[j] = (bg, foreground_pose(bg, motions[image_take[j]]))
    observations = {j: [(np.asarray(o.pixel, dtype=float), o.links[0][1]) for o in obs]
                    for j, obs in model.observations.items()}
    excluded = [int(v) for v in meta.get("EXCLUDED", [])]
    degenerate = meta.get("DEGENERATE", ["0"])[0] == "1"
    return LabeledScene(r, points, cameras, image_take, motions, observations, tracks, excluded, degenerate)


def write_ba_report(rep, path):
    with open(path, "w") as f:
        f.write(f"initial_cost {fmt(rep.initial_cost)}\n")
        f.write(f"final_cost {fmt(rep.final_cost)}\n")
        f.write(f"iterations {rep.iterations}\n")
        f.write(f"median_reproj_px {fmt(rep.median_reproj_px)}\n")
        f.write(f"termination {rep.termination}\n")


PLY_COLORS = {Label.F: (0, 255, 0), Label.B: (255, 0, 0), Label.U: (128, 128, 128)}


def write_ply(scene: LabeledScene, path):
    ids = sorted(scene.points)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {len(ids)}\n")
        f.write("property float x\nproperty float y\nproperty float z\n")
        f.write("property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n")
        for tid in ids:
            x, lab = scene.points[tid]
            r, g, b = PLY_COLORS[lab]
            f.write(f"{fmt(x[0])} {fmt(x[1])} {fmt(x[2])} {r} {g} {b}\n")
