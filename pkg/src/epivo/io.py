"""File formats: pose files, correspondence/depth/keypoint files, simulator
fixtures, SVG trajectory plots and run manifests.

Every text format is whitespace separated, ``#`` starts a comment line, and
floats are written with 17 significant digits so reading back is exact.
Malformed input raises :class:`ParseError` naming the file and line.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .correspondence import Correspondences
from .errors import DataError, ParseError
from .geometry import CameraModel, Pose, essential_from_pose, sampson_distance
from .constants import TOL
from .matcher import DescriptorSet
from .metrics import Trajectory

log = logging.getLogger(__name__)

POSE_FORMATS = ("kitti", "tartanair")
_POSE_COLUMNS = {"kitti": 12, "tartanair": 7}


def _g(v) -> str:
    return repr(float(v)) if math.isfinite(v) else ("nan" if math.isnan(v) else
                                                   ("inf" if v > 0 else "-inf"))


def _rows(path):
    """Yield ``(line_number, fields)`` for every non-blank, non-comment line."""
    try:
        fh = open(path)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        for no, line in enumerate(fh, 1):
            s = line.strip()
            if s and not s.startswith("#"):
                yield no, s.split()


def _floats(fields, path, no, n=None, what="values"):
    if n is not None and len(fields) != n:
        raise ParseError(f"expected {n} {what}, found {len(fields)}", path, no)
    try:
        return [float(f) for f in fields]
    except ValueError:
        bad = next(f for f in fields if not _is_float(f))
        raise ParseError(f"not a number: {bad!r}", path, no) from None


def _is_float(s) -> bool:
    try:
        float(s)
    except ValueError:
        return False
    return True


# ---------------------------------------------------------------------------
# Poses
# ---------------------------------------------------------------------------


def orthonormalize(R) -> np.ndarray:
    """Closest rotation in Frobenius norm."""
    U, _, Vt = np.linalg.svd(np.asarray(R, dtype=float))
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(U @ Vt))])
    return U @ D @ Vt


def _checked_rotation(R, path, no) -> np.ndarray:
    err = float(np.max(np.abs(R.T @ R - np.eye(3))))
    if not np.isfinite(err) or err > TOL.dataset_rotation or np.linalg.det(R) <= 0:
        raise DataError(f"{path}:{no}: rotation is not orthonormal (error {err:.3g})")
    if err > TOL.dataset_reorthonormalize:
        log.warning("%s:%d: re-orthonormalizing rotation (error %.3g)", path, no, err)
    return orthonormalize(R) if err > 0 else R


def quaternion_to_rotation(q) -> np.ndarray:
    """Unit quaternion ``(qx, qy, qz, qw)`` to a rotation matrix."""
    x, y, z, w = np.asarray(q, dtype=float)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_to_quaternion(R) -> np.ndarray:
    """``(qx, qy, qz, qw)`` with ``qw >= 0``, via the largest-diagonal branch."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [(R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s, s / 4]
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = [0.0] * 4
        q[i] = s / 4
        q[j] = (R[j, i] + R[i, j]) / s
        q[k] = (R[k, i] + R[i, k]) / s
        q[3] = (R[k, j] - R[j, k]) / s
    q = np.array(q)
    return -q if q[3] < 0 else q


def _pose_from_fields(vals, fmt, path, no) -> Pose:
    if fmt == "kitti":
        M = np.array(vals).reshape(3, 4)
        return Pose(_checked_rotation(M[:, :3], path, no), M[:, 3])
    t, q = np.array(vals[:3]), np.array(vals[3:])
    n = float(np.linalg.norm(q))
    if not np.isfinite(n) or abs(n - 1.0) > TOL.dataset_rotation:
        raise DataError(f"{path}:{no}: quaternion norm {n:.6g} is not 1")
    if abs(n - 1.0) > TOL.dataset_reorthonormalize:
        log.warning("%s:%d: renormalizing quaternion (norm %.9g)", path, no, n)
    return Pose(orthonormalize(quaternion_to_rotation(q / n)), t)


def detect_pose_format(path) -> str:
    for no, fields in _rows(path):
        for fmt, n in _POSE_COLUMNS.items():
            if len(fields) == n:
                return fmt
        raise ParseError(f"expected 12 (KITTI) or 7 (TartanAir) values, found {len(fields)}",
                         path, no)
    return "kitti"


def load_poses(path, fmt: str = "kitti") -> Trajectory:
    """Camera-to-world trajectory from a KITTI (12 floats, row-major
    ``[R|t]``) or TartanAir (``tx ty tz qx qy qz qw``) pose file.

    ``fmt="auto"`` decides from the first line's column count.
    """
    if fmt == "auto":
        fmt = detect_pose_format(path)
    if fmt not in POSE_FORMATS:
        raise ValueError(f"format must be one of {POSE_FORMATS} or 'auto'")
    poses = []
    for no, fields in _rows(path):
        vals = _floats(fields, path, no, _POSE_COLUMNS[fmt], "values")
        if not all(map(math.isfinite, vals)):
            raise ParseError("pose values must be finite", path, no)
        poses.append(_pose_from_fields(vals, fmt, path, no))
    return Trajectory(tuple(poses))


def format_poses(trajectory: Trajectory, fmt: str = "kitti") -> str:
    lines = []
    for p in trajectory.poses:
        if fmt == "kitti":
            vals = np.hstack([p.R, p.t[:, None]]).ravel()
        elif fmt == "tartanair":
            vals = np.concatenate([p.t, rotation_to_quaternion(p.R)])
        else:
            raise ValueError(f"format must be one of {POSE_FORMATS}")
        lines.append(" ".join(_g(v) for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def save_poses(path, trajectory: Trajectory, fmt: str = "kitti"):
    Path(path).write_text(format_poses(trajectory, fmt))


# ---------------------------------------------------------------------------
# Correspondences, depths, keypoints
# ---------------------------------------------------------------------------


def _counted(path, width, what):
    """Rows of a file whose first line is the row count."""
    rows = _rows(path)
    try:
        no, head = next(rows)
    except StopIteration:
        raise ParseError("missing count header", path, 1) from None
    if len(head) != 1 or not head[0].isdigit():
        raise ParseError("first line must be the row count", path, no)
    n = int(head[0])
    out = []
    last = no
    for no, fields in rows:
        out.append(_floats(fields, path, no, width, what))
        last = no
    if len(out) != n:
        raise ParseError(f"header announces {n} rows, found {len(out)}", path, last)
    return np.array(out, dtype=float).reshape(n, width)


def save_correspondences(path, corr: Correspondences):
    """Header line with the count, then ``u1 v1 u2 v2 confidence descriptor_distance``."""
    cols = np.column_stack([corr.x1, corr.x2, corr.confidence, corr.descriptor_distance])
    lines = [str(len(corr))] + [" ".join(_g(v) for v in row) for row in cols]
    Path(path).write_text("\n".join(lines) + "\n")


def load_correspondences(path) -> Correspondences:
    a = _counted(path, 6, "columns (u1 v1 u2 v2 confidence descriptor_distance)")
    try:
        return Correspondences(a[:, :2], a[:, 2:4], a[:, 4], a[:, 5])
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


def save_depths(path, depths):
    d = np.asarray(depths, dtype=float).reshape(-1)
    Path(path).write_text("\n".join([str(d.size)] + [_g(v) for v in d]) + "\n")


def load_depths(path) -> np.ndarray:
    """One depth per row; ``nan`` marks an unknown depth."""
    return _counted(path, 1, "value")[:, 0]


def save_disparity_grid(path, grid):
    g = np.asarray(grid, dtype=float)
    lines = [f"{g.shape[1]} {g.shape[0]}"] + [" ".join(_g(v) for v in row) for row in g]
    Path(path).write_text("\n".join(lines) + "\n")


def load_disparity_grid(path) -> np.ndarray:
    """Dense disparity: a ``width height`` header, then ``height`` rows of
    ``width`` floats in pixels (``0`` or ``nan`` where unknown)."""
    rows = _rows(path)
    try:
        no, head = next(rows)
    except StopIteration:
        raise ParseError("missing 'width height' header", path, 1) from None
    if len(head) != 2 or not all(h.isdigit() for h in head):
        raise ParseError("header must be 'width height'", path, no)
    w, h = int(head[0]), int(head[1])
    out = [_floats(f, path, n, w, "columns") for n, f in rows]
    if len(out) != h:
        raise ParseError(f"expected {h} rows, found {len(out)}", path, no)
    return np.array(out, dtype=float).reshape(h, w)


def depths_from_disparity(grid, pixels, cam: CameraModel) -> np.ndarray:
    """Depth ``f B / d`` at the nearest grid pixel; NaN outside the grid or
    where the disparity is not positive."""
    g = np.asarray(grid, dtype=float)
    p = np.rint(np.asarray(pixels, dtype=float)).astype(np.int64)
    inside = (p[:, 0] >= 0) & (p[:, 0] < g.shape[1]) & (p[:, 1] >= 0) & (p[:, 1] < g.shape[0])
    d = np.full(p.shape[0], np.nan)
    d[inside] = g[p[inside, 1], p[inside, 0]]
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(d > 0, cam.fx * cam.baseline / d, np.nan)


def save_keypoints(path, locations, depths):
    a = np.column_stack([locations, depths])
    lines = [str(a.shape[0])] + [" ".join(_g(v) for v in row) for row in a]
    Path(path).write_text("\n".join(lines) + "\n")


def load_keypoints(path):
    """``(locations (n, 2), depths (n,))`` from ``u v depth`` rows."""
    a = _counted(path, 3, "columns (u v depth)")
    if not np.all(np.isfinite(a[:, :2])):
        raise DataError(f"{path}: keypoint locations must be finite")
    return a[:, :2], a[:, 2]


def load_descriptors(path, n: int | None = None) -> np.ndarray:
    try:
        d = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read descriptors {path}: {exc}") from None
    if d.ndim != 2 or (n is not None and d.shape[0] != n):
        raise DataError(f"{path}: expected a ({n}, dim) descriptor array, got {d.shape}")
    return d.astype(float)


def save_descriptor_set(path, ds: DescriptorSet):
    """Text container: ``n dim`` header, ``n`` descriptor rows, then ``n`` ``u v`` rows."""
    lines = [f"{ds.n} {ds.dim}"]
    lines += [" ".join(_g(v) for v in row) for row in ds.descriptors]
    lines += [" ".join(_g(v) for v in row) for row in ds.locations]
    Path(path).write_text("\n".join(lines) + "\n")


def load_descriptor_set(path) -> DescriptorSet:
    rows = _rows(path)
    try:
        no, head = next(rows)
    except StopIteration:
        raise ParseError("missing 'n dim' header", path, 1) from None
    if len(head) != 2 or not all(h.isdigit() for h in head):
        raise ParseError("header must be 'n dim'", path, no)
    n, dim = int(head[0]), int(head[1])
    desc, loc = [], []
    for no, fields in rows:
        if len(desc) < n:
            desc.append(_floats(fields, path, no, dim, "descriptor values"))
        elif len(loc) < n:
            loc.append(_floats(fields, path, no, 2, "location values (u v)"))
        else:
            raise ParseError(f"more than {2 * n} data rows", path, no)
    if len(loc) != n:
        raise ParseError(f"expected {n} descriptor and {n} location rows", path, no)
    try:
        return DescriptorSet(np.array(desc).reshape(n, dim), np.array(loc).reshape(n, 2))
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Camera
# ---------------------------------------------------------------------------

_CAMERA_KEYS = ("fx", "fy", "cx", "cy", "baseline", "k1", "k2", "width", "height")


def camera_to_dict(cam: CameraModel) -> dict:
    return {k: getattr(cam, k) for k in _CAMERA_KEYS}


def load_camera(path) -> CameraModel:
    try:
        d = json.loads(Path(path).read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ParseError(exc.msg, path, exc.lineno) from None
    extra = set(d) - set(_CAMERA_KEYS)
    if extra:
        raise DataError(f"{path}: unknown camera keys {sorted(extra)}")
    try:
        return CameraModel(**d)
    except (TypeError, ValueError) as exc:
        raise DataError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# Simulator fixtures
# ---------------------------------------------------------------------------


def _dump_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass(frozen=True, eq=False)
class PairRecord:
    clean: Correspondences
    noisy: Correspondences
    pseudo_gt: Correspondences
    depths: np.ndarray


@dataclass(frozen=True, eq=False)
class Fixture:
    """A simulated sequence on disk.

    Layout::

        camera.json            intrinsics and stereo baseline
        poses.txt              true camera-to-world poses (KITTI rows)
        frames/NNNNNN.kp       keypoints: count, then ``u v depth`` rows
        frames/NNNNNN.desc.npy descriptors, one row per keypoint
        pairs/NNNNNN.clean     noise-free correspondences of frames N, N+1
        pairs/NNNNNN.noisy     the same with simulated noise
        pairs/NNNNNN.pgt       noisy matches snapped onto the true epipolar lines
        pairs/NNNNNN.depth     first-frame stereo depth of each correspondence
    """

    root: Path
    cam: CameraModel
    truth: Trajectory
    info: dict

    @property
    def n_frames(self) -> int:
        return len(self.truth)

    def truth_relatives(self) -> list[Pose]:
        """Relative poses in the epipolar convention (``X_{k+1} = R X_k + t``)."""
        return [p.inverse() for p in self.truth.relatives()]

    def frame(self, k: int):
        from .matcher import DescriptorSet
        from .pipeline import Frame

        loc, z = load_keypoints(self.root / "frames" / f"{k:06d}.kp")
        desc = load_descriptors(self.root / "frames" / f"{k:06d}.desc.npy", loc.shape[0])
        return Frame(self.cam, DescriptorSet(desc, loc), z, index=k)

    def frames(self) -> list:
        return [self.frame(k) for k in range(self.n_frames)]

    def pair(self, k: int) -> PairRecord:
        base = self.root / "pairs" / f"{k:06d}"
        rec = PairRecord(load_correspondences(f"{base}.clean"),
                         load_correspondences(f"{base}.noisy"),
                         load_correspondences(f"{base}.pgt"),
                         load_depths(f"{base}.depth"))
        n = len(rec.clean)
        if not (len(rec.noisy) == len(rec.pseudo_gt) == rec.depths.size == n):
            raise DataError(f"{base}.*: pair files disagree on the correspondence count")
        return rec

    def verify_pair(self, k: int, rec: PairRecord | None = None, tol: float = 1e-10):
        """Check that the clean correspondences are epipolar-exact under the
        stored poses."""
        rec = rec or self.pair(k)
        e = essential_from_pose(self.truth_relatives()[k])
        d = sampson_distance(e, self.cam.normalize(rec.clean.x1), self.cam.normalize(rec.clean.x2))
        worst = float(d.max()) if d.count() else 0.0
        if worst > tol:
            raise DataError(f"pair {k}: clean correspondences are not epipolar "
                            f"(Sampson {worst:.3g} > {tol:g})")


def write_fixture(root, scene, noise, seed: int, sigma_px: float | None = None,
                  keypoint_budget: int | None = None) -> list[Path]:
    """Write ``scene`` with keypoint noise ``sigma_px`` (default ``noise.sigma_p``)
    and ``noise``-perturbed pair correspondences; returns the files written."""
    from .pipeline import scene_truth, simulated_frames
    from .sim import labeled_pair

    root = Path(root)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    (root / "pairs").mkdir(exist_ok=True)
    sigma = noise.sigma_p if sigma_px is None else sigma_px
    written = []

    def out(p):
        written.append(p)
        return p

    _dump_json(out(root / "camera.json"), camera_to_dict(scene.cam))
    truth, _ = scene_truth(scene)
    save_poses(out(root / "poses.txt"), truth)
    for f in simulated_frames(scene, sigma, seed, keypoint_budget):
        stem = root / "frames" / f"{f.index:06d}"
        save_keypoints(out(Path(f"{stem}.kp")), f.descriptors.locations, f.depths)
        np.save(out(Path(f"{stem}.desc.npy")), f.descriptors.descriptors)
    for k in range(scene.n_frames - 1):
        lp = labeled_pair(scene, k, noise, seed * 100003 + k)
        stem = root / "pairs" / f"{k:06d}"
        save_correspondences(out(Path(f"{stem}.clean")), lp.clean)
        save_correspondences(out(Path(f"{stem}.noisy")), lp.noisy)
        save_correspondences(out(Path(f"{stem}.pgt")), lp.pseudo_gt)
        save_depths(out(Path(f"{stem}.depth")), lp.depths)
    _dump_json(out(root / "fixture.json"), {"n_frames": scene.n_frames, "seed": seed,
                                            "sigma_px": sigma})
    return written


def load_fixture(root, verify: bool = True) -> Fixture:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"fixture directory {root} does not exist")
    cam = load_camera(root / "camera.json")
    truth = load_poses(root / "poses.txt")
    try:
        info = json.loads((root / "fixture.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{root / 'fixture.json'}: {exc}") from None
    if info.get("n_frames") != len(truth):
        raise DataError(f"{root}: poses.txt has {len(truth)} poses, fixture.json "
                        f"announces {info.get('n_frames')}")
    fx = Fixture(root, cam, truth, info)
    if verify:
        for k in range(fx.n_frames - 1):
            fx.verify_pair(k)
    return fx


def labeled_pairs(fixture: Fixture) -> list:
    """Training pairs of a fixture."""
    from .sim import LabeledPair

    rels = fixture.truth_relatives()
    out = []
    for k in range(fixture.n_frames - 1):
        r = fixture.pair(k)
        out.append(LabeledPair(r.noisy, r.clean, r.pseudo_gt, rels[k], r.depths, fixture.cam))
    return out


# ---------------------------------------------------------------------------
# Plots
# ---------------------------------------------------------------------------

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")
_SIZE = 480
_MARGIN = 40


def _svg(polylines: dict, title: str, xlabel: str, ylabel: str) -> str:
    """Polylines ``{name: (n, 2) array}`` on common, equal-aspect axes."""
    pts = np.vstack([np.asarray(p, dtype=float).reshape(-1, 2) for p in polylines.values()])
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max(hi - lo)) or 1.0
    mid = (lo + hi) / 2
    inner = _SIZE - 2 * _MARGIN

    def px(p):
        q = (np.asarray(p) - mid) / span * inner
        return np.column_stack([_SIZE / 2 + q[:, 0], _SIZE / 2 - q[:, 1]])

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_SIZE}" height="{_SIZE}" '
           f'viewBox="0 0 {_SIZE} {_SIZE}">',
           f'<rect width="{_SIZE}" height="{_SIZE}" fill="white"/>',
           f'<text x="{_SIZE / 2:.0f}" y="20" text-anchor="middle" font-size="14">{title}</text>',
           f'<rect x="{_MARGIN}" y="{_MARGIN}" width="{inner}" height="{inner}" fill="none" '
           f'stroke="black"/>',
           f'<text x="{_SIZE / 2:.0f}" y="{_SIZE - 10}" text-anchor="middle" font-size="12">'
           f'{xlabel} [{mid[0] - span / 2:.3g}, {mid[0] + span / 2:.3g}] m</text>',
           f'<text x="12" y="{_SIZE / 2:.0f}" text-anchor="middle" font-size="12" '
           f'transform="rotate(-90 12 {_SIZE / 2:.0f})">{ylabel} [{mid[1] - span / 2:.3g}, '
           f'{mid[1] + span / 2:.3g}] m</text>']
    for i, (name, p) in enumerate(polylines.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{x:.2f},{y:.2f}" for x, y in px(np.asarray(p).reshape(-1, 2)))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" '
                   f'points="{coords}"><title>{name}</title></polyline>')
        out.append(f'<text x="{_MARGIN + 8}" y="{_MARGIN + 16 + 14 * i}" font-size="12" '
                   f'fill="{color}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_xz(trajectories: dict) -> str:
    """Top view: X to the right, Z up."""
    return _svg({k: t.positions[:, [0, 2]] for k, t in trajectories.items()},
                "trajectory (X-Z)", "X", "Z")


def plot_3d(trajectories: dict, azimuth: float = 0.6, elevation: float = 0.4) -> str:
    """Orthographic view of the 3-D polylines from the given viewing angles."""
    ca, sa, ce, se = np.cos(azimuth), np.sin(azimuth), np.cos(elevation), np.sin(elevation)
    # screen x, screen y for a camera orbiting the Y (down) axis
    P = np.array([[ca, 0.0, -sa], [-sa * se, -ce, -ca * se]])
    return _svg({k: t.positions @ P.T for k, t in trajectories.items()},
                "trajectory (3-D)", "u", "v")


# ---------------------------------------------------------------------------
# Manifests and run outputs
# ---------------------------------------------------------------------------


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(root, files, config_hash: str, seeds: dict, command: str) -> Path:
    """``manifest.json`` listing every output file with its hash, plus the
    config hash and seeds that produced them."""
    root = Path(root)
    entries = {str(Path(f).relative_to(root)): sha256_file(f) for f in sorted(map(Path, files))}
    path = root / "manifest.json"
    _dump_json(path, {"command": command, "config_sha256": config_hash, "seeds": seeds,
                      "files": entries})
    return path


def write_trace(path, trace):
    lines = ["epoch,loss"] + [f"{i + 1},{_g(v)}" for i, v in enumerate(trace)]
    Path(path).write_text("\n".join(lines) + "\n")


def write_diagnostics(path, diagnostics):
    def clean(v):
        if isinstance(v, (np.integer,)):
            return int(v)
        if isinstance(v, (np.floating, float)):
            return float(v)
        return v

    lines = [json.dumps({k: clean(v) for k, v in d.items()}, sort_keys=True) for d in diagnostics]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def save_hypotheses(path, hypotheses):
    """One line per hypothesis: nine row-major entries of ``E``, score, solver tag."""
    lines = [" ".join([*(_g(v) for v in h.e.ravel()), _g(h.sampson_score), h.solver_tag])
             for h in hypotheses]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_hypotheses(path) -> list:
    from .solvers import SOLVER_TAGS, EssentialHypothesis

    out = []
    for no, fields in _rows(path):
        if len(fields) != 11:
            raise ParseError(f"expected 9 matrix entries, a score and a tag, found {len(fields)} fields",
                             path, no)
        if fields[10] not in SOLVER_TAGS:
            raise ParseError(f"unknown solver tag {fields[10]!r}", path, no)
        v = _floats(fields[:10], path, no)
        out.append(EssentialHypothesis(np.array(v[:9]).reshape(3, 3), v[9], fields[10]))
    return out


def dump_graph(path, graph):
    """Edge-list text: ``index x y z weight`` node lines, then ``i j tag`` edge lines."""
    lines = [f"# nodes {graph.n}"]
    lines += [f"{i} {_g(p[0])} {_g(p[1])} {_g(p[2])} {_g(w)}"
              for i, (p, w) in enumerate(zip(graph.points, graph.weights))]
    lines.append(f"# edges {len(graph.edges)}")
    lines += [f"{i} {j} {tag}" for (i, j), tag in zip(graph.edges.tolist(), graph.tags)]
    Path(path).write_text("\n".join(lines) + "\n")