"""On-disk formats for scenes, models, clouds, poses and evaluation output.

Binary is used only for bulk grids: heatmaps (``HMP1``) and depth / mask
arrays (numpy ``.npy``). Everything else is text: JSON manifests, ASCII PLY
and plain-text 4x4 poses, with floats written via ``repr`` so a read after
a write returns the same float64 values.

All writers go through :func:`atomic_write` (temp file + rename).
"""

from __future__ import annotations

import csv
import io
import json
import os
import struct
import tempfile
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ParseError, SchemaMismatch, ValidationFailure
from .geometry import CameraView, RigidTransform
from .heatmap import Heatmap
from .refine import DepthImage, ScoredCloud

SCHEMA_VERSION = 1
HEATMAP_MAGIC = b"HMP1"
_HMP_HEADER = struct.Struct("<4sIIII")

EVAL_COLUMNS = ("scene_id", "object_id", "detection_idx", "confidence", "add_error_m", "verdict")


def atomic_write(path, data: bytes | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(x) -> str:
    return repr(float(x))


# -- heatmaps -----------------------------------------------------------------

def encode_heatmap(hm: Heatmap) -> bytes:
    h, w = hm.values.shape
    return _HMP_HEADER.pack(HEATMAP_MAGIC, w, h, hm.view_id, hm.keypoint_id) + \
        np.ascontiguousarray(hm.values, dtype="<f4").tobytes()


def decode_heatmap(buf: bytes, source: str = "<bytes>") -> Heatmap:
    if len(buf) < _HMP_HEADER.size:
        raise ParseError(f"{source}: byte 0: header needs {_HMP_HEADER.size} bytes, got {len(buf)}")
    magic, w, h, view_id, kid = _HMP_HEADER.unpack_from(buf)
    if magic != HEATMAP_MAGIC:
        raise ParseError(f"{source}: byte 0: bad magic {magic!r}, expected {HEATMAP_MAGIC!r}")
    expected = 4 * w * h
    actual = len(buf) - _HMP_HEADER.size
    if actual != expected:
        raise ParseError(f"{source}: byte {_HMP_HEADER.size}: payload length {actual}, expected {expected} "
                         f"for {w}x{h} floats")
    values = np.frombuffer(buf, dtype="<f4", offset=_HMP_HEADER.size).reshape(h, w).astype(np.float64)
    try:
        return Heatmap(int(view_id), int(kid), values)
    except ValidationFailure as exc:
        raise ParseError(f"{source}: {exc}") from None


def write_heatmap(path, hm: Heatmap) -> Path:
    return atomic_write(path, encode_heatmap(hm))


def read_heatmap(path) -> Heatmap:
    return decode_heatmap(Path(path).read_bytes(), str(path))


# -- dense arrays -------------------------------------------------------------

def write_array(path, arr: np.ndarray) -> Path:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr), allow_pickle=False)
    return atomic_write(path, buf.getvalue())


def read_array(path) -> np.ndarray:
    try:
        return np.load(Path(path), allow_pickle=False)
    except (ValueError, EOFError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise ParseError(f"{path}: {exc}") from None


# -- ASCII PLY ----------------------------------------------------------------

_PLY_INT = {"char", "uchar", "short", "ushort", "int", "uint", "int8", "uint8", "int16", "uint16",
            "int32", "uint32"}
_PLY_FLOAT = {"float", "double", "float32", "float64"}


def write_ply(path, columns: dict) -> Path:
    """Write an ASCII PLY vertex element; integer arrays become ``int`` properties."""
    names = list(columns)
    arrays = [np.asarray(columns[n]).reshape(-1) for n in names]
    n = len(arrays[0]) if arrays else 0
    if any(len(a) != n for a in arrays):
        raise ValueError("all PLY columns must have the same length")
    is_int = [np.issubdtype(a.dtype, np.integer) or a.dtype == bool for a in arrays]
    lines = ["ply", "format ascii 1.0", f"element vertex {n}"]
    lines += [f"property {'int' if i else 'double'} {name}" for name, i in zip(names, is_int)]
    lines.append("end_header")
    cols = [[str(int(v)) for v in a] if i else [_fmt(v) for v in a] for a, i in zip(arrays, is_int)]
    lines += [" ".join(row) for row in zip(*cols)]
    return atomic_write(path, "\n".join(lines) + "\n")


def read_ply(path) -> dict:
    """Read an ASCII PLY vertex element into ``{property: array}`` (order preserved)."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError(f"{path}: line 1: missing 'ply' magic")
    n = None
    props: list[tuple[str, bool]] = []
    end = None
    in_vertex = False
    for i, raw in enumerate(lines[1:], start=2):
        tok = raw.split()
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if tok[1:2] != ["ascii"]:
                raise ParseError(f"{path}: line {i}: only ASCII PLY is supported, got {raw.strip()!r}")
        elif tok[0] == "element":
            in_vertex = tok[1] == "vertex"
            if in_vertex:
                try:
                    n = int(tok[2])
                except (IndexError, ValueError):
                    raise ParseError(f"{path}: line {i}: bad element line {raw.strip()!r}") from None
            elif n is not None:
                raise ParseError(f"{path}: line {i}: elements after 'vertex' are not supported")
        elif tok[0] == "property":
            if in_vertex:
                if len(tok) != 3 or tok[1] == "list":
                    raise ParseError(f"{path}: line {i}: unsupported property {raw.strip()!r}")
                if tok[1] not in _PLY_INT | _PLY_FLOAT:
                    raise ParseError(f"{path}: line {i}: unknown property type {tok[1]!r}")
                props.append((tok[2], tok[1] in _PLY_INT))
        elif tok[0] == "end_header":
            end = i
            break
        else:
            raise ParseError(f"{path}: line {i}: unexpected header line {raw.strip()!r}")
    if end is None:
        raise ParseError(f"{path}: line {len(lines)}: missing end_header")
    if n is None:
        raise ParseError(f"{path}: line {end}: no vertex element")
    body = lines[end:end + n]
    if len(body) < n:
        raise ParseError(f"{path}: line {end + len(body) + 1}: expected {n} vertices, found {len(body)}")
    cols: list[list] = [[] for _ in props]
    for j, raw in enumerate(body):
        tok = raw.split()
        if len(tok) != len(props):
            raise ParseError(f"{path}: line {end + j + 1}: expected {len(props)} values, got {len(tok)}")
        try:
            for c, t, (_, is_int) in zip(cols, tok, props):
                c.append(int(t) if is_int else float(t))
        except ValueError:
            raise ParseError(f"{path}: line {end + j + 1}: non-numeric value") from None
    return {name: np.array(c, dtype=np.int64 if is_int else np.float64) for c, (name, is_int) in zip(cols, props)}


def write_cloud(path, cloud: ScoredCloud, with_scores: bool = True) -> Path:
    cols = {"x": cloud.points[:, 0], "y": cloud.points[:, 1], "z": cloud.points[:, 2]}
    if with_scores:
        cols["score"] = cloud.scores
    return write_ply(path, cols)


def read_cloud(path) -> ScoredCloud:
    data = read_ply(path)
    try:
        pts = np.stack([data["x"], data["y"], data["z"]], axis=1)
    except KeyError as exc:
        raise ParseError(f"{path}: missing property {exc}") from None
    scores = data.get("score", np.ones(len(pts)))
    return ScoredCloud(pts, scores)


def write_votes(path, votes) -> Path:
    return write_ply(path, {"u": votes.pixels[:, 0], "v": votes.pixels[:, 1], "keypoint_id": votes.keypoint_ids,
                            "x": votes.positions[:, 0], "y": votes.positions[:, 1], "z": votes.positions[:, 2]})


def read_votes(path):
    from .simulate import Votes

    d = read_ply(path)
    try:
        return Votes(np.stack([d["u"], d["v"]], axis=1).astype(np.intp), d["keypoint_id"].astype(np.intp),
                     np.stack([d["x"], d["y"], d["z"]], axis=1))
    except KeyError as exc:
        raise ParseError(f"{path}: missing property {exc}") from None


# -- JSON / poses -------------------------------------------------------------

def write_json(path, obj) -> Path:
    return atomic_write(path, json.dumps(obj, indent=2, sort_keys=False) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def pose_to_text(pose: RigidTransform) -> str:
    return "".join(" ".join(_fmt(v) for v in row) + "\n" for row in pose.matrix())


def text_to_pose(text: str, source: str = "<text>") -> RigidTransform:
    rows = [ln.split() for ln in text.splitlines() if ln.strip()]
    if len(rows) != 4 or any(len(r) != 4 for r in rows):
        raise ParseError(f"{source}: line {min(len(rows), 4) or 1}: expected 4 rows of 4 numbers")
    try:
        m = np.array([[float(v) for v in r] for r in rows])
    except ValueError:
        raise ParseError(f"{source}: non-numeric pose entry") from None
    if not np.allclose(m[3], [0, 0, 0, 1]):
        raise ParseError(f"{source}: line 4: last row must be 0 0 0 1")
    return RigidTransform.from_matrix(m)


def write_pose(path, pose: RigidTransform) -> Path:
    return atomic_write(path, pose_to_text(pose))


def read_pose(path) -> RigidTransform:
    return text_to_pose(Path(path).read_text(encoding="utf-8"), str(path))


def _matrix_json(pose: RigidTransform) -> list:
    return [[float(v) for v in row] for row in pose.matrix()]


def _pose_from_json(m, where: str) -> RigidTransform:
    arr = np.asarray(m, dtype=float)
    if arr.shape != (4, 4):
        raise ParseError(f"{where}: expected a 4x4 matrix, got shape {arr.shape}")
    return RigidTransform.from_matrix(arr)


def check_schema(data: dict, source) -> None:
    version = data.get("schema_version") if isinstance(data, dict) else None
    if version != SCHEMA_VERSION:
        raise SchemaMismatch(f"{source}: schema_version {version!r} is not supported (expected {SCHEMA_VERSION})")


# -- scene manifests ----------------------------------------------------------

def camera_to_json(view: CameraView) -> dict:
    return {"view_id": view.view_id, "fx": view.fx, "fy": view.fy, "cx": view.cx, "cy": view.cy,
            "extrinsics": _matrix_json(view.world_to_camera)}


def camera_from_json(d: dict, where: str) -> CameraView:
    try:
        return CameraView(int(d["view_id"]), float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                          _pose_from_json(d["extrinsics"], where))
    except KeyError as exc:
        raise ParseError(f"{where}: missing key {exc}") from None


def write_scene(directory, scene) -> Path:
    """Write a :class:`~mvfuse.pipeline.SceneInput` as manifest plus data files.

    Layout::

        scene.json
        model/{model.json, keypoints.ply, surface.ply}
        det_XXX/{kp_YY.hmp, depth.npy, mask.npy, votes.ply}
        gt/pose_XXX.txt
    """
    from .object_model import save_model

    root = Path(directory)
    model_path = save_model(scene.model, root / "model")
    dets = []
    for d in scene.detections:
        sub = f"det_{d.detection_id:03d}"
        hms = []
        for hm in d.heatmaps:
            rel = f"{sub}/kp_{hm.keypoint_id:02d}.hmp"
            write_heatmap(root / rel, hm)
            hms.append(rel)
        write_array(root / sub / "depth.npy", d.depth.depth)
        write_array(root / sub / "mask.npy", d.depth.mask.astype(np.uint8))
        write_votes(root / sub / "votes.ply", d.votes)
        dets.append({"detection_id": d.detection_id, "view_id": d.view.view_id,
                     "patch_origin": list(d.view.patch_origin), "patch_size": list(d.view.patch_size),
                     "heatmaps": hms, "depth": f"{sub}/depth.npy", "mask": f"{sub}/mask.npy",
                     "votes": f"{sub}/votes.ply"})
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "scene_id": scene.scene_id,
        "model": str(model_path.relative_to(root)),
        "cameras": [camera_to_json(c) for c in scene.cameras],
        "detections": dets,
    }
    if scene.ground_truth_poses is not None:
        poses = []
        for i, p in enumerate(scene.ground_truth_poses):
            rel = f"gt/pose_{i:03d}.txt"
            write_pose(root / rel, p)
            poses.append(rel)
        gt = {"poses": poses}
        if scene.visibility is not None:
            gt["visibility"] = [float(v) for v in scene.visibility]
        manifest["ground_truth"] = gt
    return write_json(root / "scene.json", manifest)


def read_scene(path):
    """Load a scene manifest written by :func:`write_scene` into a ``SceneInput``."""
    from .object_model import load_model
    from .pipeline import DetectionInput, SceneInput

    path = Path(path)
    if path.is_dir():
        path = path / "scene.json"
    root = path.parent
    data = read_json(path)
    check_schema(data, path)

    def need(obj, key, where):
        try:
            return obj[key]
        except (KeyError, TypeError):
            raise ParseError(f"{path}: {where}: missing key {key!r}") from None

    def ref(rel, where) -> Path:
        p = root / rel
        if not p.is_file():
            raise ValidationFailure(f"{path}: {where}: referenced file {rel!r} does not exist")
        return p

    model = load_model(ref(need(data, "model", "manifest"), "model"))
    cameras = [camera_from_json(c, f"{path}: cameras[{i}]") for i, c in enumerate(need(data, "cameras", "manifest"))]
    by_id = {c.view_id: c for c in cameras}
    dets = []
    for i, d in enumerate(need(data, "detections", "manifest")):
        where = f"detections[{i}]"
        vid = int(need(d, "view_id", where))
        if vid not in by_id:
            raise ValidationFailure(f"{path}: {where}: unknown view_id {vid}")
        view = by_id[vid].with_patch(tuple(need(d, "patch_origin", where)), tuple(need(d, "patch_size", where)))
        hms = [read_heatmap(ref(r, where)) for r in need(d, "heatmaps", where)]
        for k, hm in enumerate(hms):
            if hm.keypoint_id != k or hm.view_id != vid:
                raise ValidationFailure(f"{path}: {where}: heatmap {k} is for view {hm.view_id} keypoint "
                                        f"{hm.keypoint_id}")
        depth = DepthImage(vid, read_array(ref(need(d, "depth", where), where)),
                           read_array(ref(need(d, "mask", where), where)).astype(bool))
        votes = read_votes(ref(need(d, "votes", where), where))
        dets.append(DetectionInput(int(d.get("detection_id", i)), view, hms, depth, votes))
    gt_poses = visibility = None
    gt = data.get("ground_truth")
    if gt is not None:
        gt_poses = [read_pose(ref(r, "ground_truth")) for r in need(gt, "poses", "ground_truth")]
        if gt.get("visibility") is not None:
            visibility = np.asarray(gt["visibility"], dtype=float)
    return SceneInput(str(data.get("scene_id", path.parent.name)), model, cameras, dets, gt_poses, visibility)


# -- detections and evaluation ------------------------------------------------

def detections_to_json(detections, scene_id: str = "", config: Optional[dict] = None) -> dict:
    out = []
    for rank, d in enumerate(detections):
        h = d.hypothesis
        out.append({
            "rank": rank,
            "object_id": d.object_id,
            "cluster_id": h.cluster_id,
            "confidence": float(d.confidence),
            "keypoint_uncertainty": float(h.keypoint_uncertainty),
            "icp_error": None if h.icp_error is None else float(h.icp_error),
            "pose": _matrix_json(d.pose),
        })
    doc = {"schema_version": SCHEMA_VERSION, "scene_id": scene_id, "detections": out}
    if config is not None:
        doc["config"] = config
    return doc


def write_detections(path, detections, scene_id: str = "", config: Optional[dict] = None) -> Path:
    return write_json(path, detections_to_json(detections, scene_id, config))


def read_detections(path) -> tuple[str, list]:
    """Return ``(scene_id, detections)`` from a detections file."""
    from .fusion import PoseHypothesis
    from .score import Detection

    data = read_json(path)
    check_schema(data, path)
    scene_id = str(data.get("scene_id", ""))
    dets = []
    for i, d in enumerate(data.get("detections", [])):
        where = f"{path}: detections[{i}]"
        try:
            pose = _pose_from_json(d["pose"], where)
            h = PoseHypothesis(pose, float(d["keypoint_uncertainty"]), int(d.get("cluster_id", -1)),
                               d.get("icp_error"), float(d["confidence"]))
            dets.append(Detection(h, float(d["confidence"]), str(d["object_id"]), scene_id))
        except KeyError as exc:
            raise ParseError(f"{where}: missing key {exc}") from None
    return scene_id, dets


def write_eval_csv(path, records) -> Path:
    """One row per detection, in the order given."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(EVAL_COLUMNS)
    for idx, r in enumerate(records):
        d = r.detection
        w.writerow([d.scene_id, d.object_id, idx, _fmt(d.confidence),
                    "" if r.add_error is None else _fmt(r.add_error), r.verdict.value])
    return atomic_write(path, buf.getvalue())


def read_eval_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != EVAL_COLUMNS:
            raise ParseError(f"{path}: line 1: expected header {','.join(EVAL_COLUMNS)}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(EVAL_COLUMNS):
                raise ParseError(f"{path}: line {lineno}: expected {len(EVAL_COLUMNS)} fields, got {len(row)}")
            try:
                rows.append({"scene_id": row[0], "object_id": row[1], "detection_idx": int(row[2]),
                             "confidence": float(row[3]), "add_error_m": float(row[4]) if row[4] else None,
                             "verdict": row[5]})
            except ValueError:
                raise ParseError(f"{path}: line {lineno}: malformed number") from None
    return rows


def write_table(path, header, rows) -> Path:
    """Generic CSV with floats at full precision."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return atomic_write(path, buf.getvalue())
