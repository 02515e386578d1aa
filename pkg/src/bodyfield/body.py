"""Skinned parametric body: template mesh, UV atlas, kinematic tree, LBS posing.

The model container is generic (any vertex count, any joint count, optional
linear blend-shape bases). A procedural capsule-limb humanoid generator
provides the default test subject.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class BodyFormatError(ValueError):
    """Raised when a body file cannot be parsed."""


class BodyValidationError(ValueError):
    """Raised when loaded or constructed body data violates an invariant."""


# ---------------------------------------------------------------------------
# Containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkinnedBodyModel:
    """Template mesh with per-face-corner UV atlas, skinning weights and tree.

    uv is stored per face corner (F, 3, 2) rather than per vertex so that
    texture seams are representable. Optional linear bases deform the
    template before skinning: shape_dirs (V, 3, S) against shape
    coefficients, pose_dirs (V, 3, 9*(J-1)) against flattened (R_j - I)
    rotation features of the non-root joints.
    """

    template_vertices: np.ndarray      # (V, 3) float64, meters
    faces: np.ndarray                  # (F, 3) int32
    uv_per_corner: np.ndarray          # (F, 3, 2) float64 in [0, 1]
    skinning_weights: np.ndarray       # (V, J) float64, rows sum to 1
    joints_rest: np.ndarray            # (J, 3) float64
    parent: np.ndarray                 # (J,) int32, -1 for the root
    shape_dirs: np.ndarray | None = None   # (V, 3, S)
    pose_dirs: np.ndarray | None = None    # (V, 3, 9*(J-1))
    charts: np.ndarray | None = None       # (P, 5): umin vmin umax vmax joint
    face_part: np.ndarray | None = None    # (F,) int32 part id per face

    @property
    def num_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def num_faces(self) -> int:
        return self.faces.shape[0]

    @property
    def num_joints(self) -> int:
        return self.joints_rest.shape[0]

    def validate(self) -> None:
        v, f, j = self.num_vertices, self.num_faces, self.num_joints
        if self.faces.shape != (f, 3) or self.faces.min() < 0 or self.faces.max() >= v:
            raise BodyValidationError("face indices out of range")
        if self.uv_per_corner.shape != (f, 3, 2):
            raise BodyValidationError("uv_per_corner shape mismatch")
        if self.uv_per_corner.min() < 0.0 or self.uv_per_corner.max() > 1.0:
            raise BodyValidationError("uv components must lie in [0, 1]")
        if self.skinning_weights.shape != (v, j):
            raise BodyValidationError("skinning_weights shape mismatch")
        if self.skinning_weights.min() < 0.0:
            raise BodyValidationError("skinning weights must be non-negative")
        sums = self.skinning_weights.sum(axis=1)
        if np.max(np.abs(sums - 1.0)) > 1e-6:
            raise BodyValidationError("skinning weights must sum to 1 per vertex")
        if self.parent.shape != (j,):
            raise BodyValidationError("parent array shape mismatch")
        roots = np.flatnonzero(self.parent < 0)
        if len(roots) != 1:
            raise BodyValidationError("kinematic tree must have exactly one root")
        # acyclicity: walking up from every joint must terminate at the root
        for k in range(j):
            seen, cur = 0, k
            while cur >= 0:
                cur = int(self.parent[cur])
                seen += 1
                if seen > j:
                    raise BodyValidationError("kinematic tree contains a cycle")
        if self.shape_dirs is not None and self.shape_dirs.shape[:2] != (v, 3):
            raise BodyValidationError("shape_dirs shape mismatch")
        if self.pose_dirs is not None and self.pose_dirs.shape[:2] != (v, 3):
            raise BodyValidationError("pose_dirs shape mismatch")


@dataclass(frozen=True)
class PoseParams:
    """Skeletal pose: root translation plus one axis-angle vector per joint."""

    root_translation: np.ndarray       # (3,)
    joint_rotations: np.ndarray        # (J, 3) axis-angle, radians

    @staticmethod
    def rest(num_joints: int) -> "PoseParams":
        return PoseParams(np.zeros(3), np.zeros((num_joints, 3)))

    @property
    def num_joints(self) -> int:
        return self.joint_rotations.shape[0]

    def flat_nonroot(self) -> np.ndarray:
        """Axis-angles of the non-root joints, flattened (world placement excluded)."""
        return np.asarray(self.joint_rotations[1:], dtype=np.float64).ravel()


@dataclass(frozen=True)
class ShapeParams:
    """Coefficients against the model's shape basis (may be empty)."""

    coefficients: np.ndarray

    @staticmethod
    def neutral(dim: int = 0) -> "ShapeParams":
        return ShapeParams(np.zeros(dim))


@dataclass(frozen=True)
class PosedMesh:
    """Deformed vertices; faces and uv are shared with the source model."""

    vertices: np.ndarray               # (V, 3)
    faces: np.ndarray                  # shared reference
    uv_per_corner: np.ndarray          # shared reference


# ---------------------------------------------------------------------------
# Kinematics
# ---------------------------------------------------------------------------


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Axis-angle 3-vector to rotation matrix; the zero vector maps to identity."""
    v = np.asarray(axis_angle, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    k = np.array([[0.0, -v[2], v[1]],
                  [v[2], 0.0, -v[0]],
                  [-v[1], v[0], 0.0]])
    if theta < 1e-8:
        # second-order series; exact enough at this magnitude
        return np.eye(3) + k + 0.5 * (k @ k)
    a = np.sin(theta) / theta
    b = (1.0 - np.cos(theta)) / (theta * theta)
    return np.eye(3) + a * k + b * (k @ k)


def forward_kinematics(model: SkinnedBodyModel, pose: PoseParams) -> np.ndarray:
    """World 4x4 transform per joint.

    Each joint's local transform rotates about its rest position offset from
    the parent; the root additionally carries the pose's root translation.
    """
    j = model.num_joints
    if pose.num_joints != j:
        raise ValueError(f"pose has {pose.num_joints} joints, model has {j}")
    world = np.zeros((j, 4, 4))
    order = _topological_order(model.parent)
    for idx in order:
        local = np.eye(4)
        local[:3, :3] = rodrigues(pose.joint_rotations[idx])
        p = int(model.parent[idx])
        if p < 0:
            local[:3, 3] = model.joints_rest[idx] + pose.root_translation
            world[idx] = local
        else:
            local[:3, 3] = model.joints_rest[idx] - model.joints_rest[p]
            world[idx] = world[p] @ local
    return world


def _topological_order(parent: np.ndarray) -> list[int]:
    j = len(parent)
    order: list[int] = []
    emitted = np.zeros(j, dtype=bool)
    pending = list(range(j))
    while pending:
        rest = []
        for idx in pending:
            p = int(parent[idx])
            if p < 0 or emitted[p]:
                order.append(idx)
                emitted[idx] = True
            else:
                rest.append(idx)
        if len(rest) == len(pending):
            raise BodyValidationError("kinematic tree contains a cycle")
        pending = rest
    return order


def pose_rotation_features(model: SkinnedBodyModel, pose: PoseParams) -> np.ndarray:
    """Flattened (R_j - I) over non-root joints; zero at the rest pose."""
    feats = [(rodrigues(pose.joint_rotations[k]) - np.eye(3)).ravel()
             for k in range(1, model.num_joints)]
    if not feats:
        return np.zeros(0)
    return np.concatenate(feats)


def pose_body(model: SkinnedBodyModel, pose: PoseParams,
              shape: ShapeParams | None = None) -> PosedMesh:
    """Deform the template by the blend bases, then skin it with LBS."""
    verts = model.template_vertices.copy()
    if model.shape_dirs is not None:
        beta = np.zeros(model.shape_dirs.shape[2]) if shape is None else shape.coefficients
        if beta.shape[0] != model.shape_dirs.shape[2]:
            raise ValueError("shape coefficient dimension mismatch")
        verts += model.shape_dirs @ beta
    elif shape is not None and shape.coefficients.size:
        raise ValueError("model has no shape basis but coefficients were given")
    if model.pose_dirs is not None:
        feats = pose_rotation_features(model, pose)
        if feats.shape[0] != model.pose_dirs.shape[2]:
            raise ValueError("pose basis dimension mismatch")
        verts += model.pose_dirs @ feats

    world = forward_kinematics(model, pose)
    # skinning transform: world transform composed with the inverse rest
    # placement (a pure translation, since rest joints carry no rotation)
    skin = world.copy()
    skin[:, :3, 3] -= np.einsum("jab,jb->ja", world[:, :3, :3], model.joints_rest)
    per_vertex = np.einsum("vj,jab->vab", model.skinning_weights, skin)
    out = np.einsum("vab,vb->va", per_vertex[:, :3, :3], verts) + per_vertex[:, :3, 3]
    return PosedMesh(out, model.faces, model.uv_per_corner)


# ---------------------------------------------------------------------------
# Procedural toy humanoid
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyBodySpec:
    """Parameters for the capsule-limb humanoid (torso + head + 4 limbs)."""

    torso_length: float = 0.46
    torso_radius: float = 0.13
    head_radius: float = 0.11
    arm_length: float = 0.50
    arm_radius: float = 0.055
    leg_length: float = 0.60
    leg_radius: float = 0.075
    radial_segments: int = 12
    length_segments: int = 5
    cap_rings: int = 2
    blend_radius: float = 0.07


# joint indices of the toy skeleton
PELVIS, CHEST, NECK, SHOULDER_L, SHOULDER_R, HIP_L, HIP_R = range(7)
TOY_PARENT = np.array([-1, PELVIS, CHEST, CHEST, CHEST, PELVIS, PELVIS], dtype=np.int32)
TOY_PART_NAMES = ("torso", "head", "arm_l", "arm_r", "leg_l", "leg_r")


def generate_toy_body(spec: ToyBodySpec = ToyBodySpec()) -> SkinnedBodyModel:
    """Build the capsule-limb humanoid with disjoint UV charts and smooth weights."""
    for name in ("torso_length", "torso_radius", "head_radius", "arm_length",
                 "arm_radius", "leg_length", "leg_radius", "blend_radius"):
        if getattr(spec, name) <= 0.0:
            raise ValueError(f"toy body spec: {name} must be positive")
    if spec.radial_segments < 3 or spec.length_segments < 1 or spec.cap_rings < 1:
        raise ValueError("toy body spec: mesh resolution too low")

    hip_z = 0.04 + spec.leg_length
    pelvis = np.array([0.0, 0.0, hip_z + 0.06])
    chest = pelvis + np.array([0.0, 0.0, spec.torso_length])
    neck = chest + np.array([0.0, 0.0, 0.05])
    shoulder_w = spec.torso_radius + 0.55 * spec.arm_radius
    shoulder_l = chest + np.array([-shoulder_w, 0.0, -0.05])
    shoulder_r = chest + np.array([shoulder_w, 0.0, -0.05])
    hip_l = pelvis + np.array([-0.09, 0.0, -0.06])
    hip_r = pelvis + np.array([0.09, 0.0, -0.06])
    joints = np.stack([pelvis, chest, neck, shoulder_l, shoulder_r, hip_l, hip_r])

    down = np.array([0.0, 0.0, -1.0])
    head_lo = neck + np.array([0.0, 0.0, spec.head_radius * 0.4])
    head_hi = head_lo + np.array([0.0, 0.0, spec.head_radius * 0.9])
    # capsule axis endpoints and radius per part
    parts = [
        (pelvis - np.array([0.0, 0.0, 0.02]), chest, spec.torso_radius),
        (head_lo, head_hi, spec.head_radius),
        (shoulder_l, shoulder_l + spec.arm_length * down, spec.arm_radius),
        (shoulder_r, shoulder_r + spec.arm_length * down, spec.arm_radius),
        (hip_l, hip_l + spec.leg_length * down, spec.leg_radius),
        (hip_r, hip_r + spec.leg_length * down, spec.leg_radius),
    ]

    # 3 x 2 atlas grid, one rectangle per part, with a safety margin
    rects = []
    for i in range(6):
        col, row = i % 3, i // 3
        margin = 0.015
        rects.append((col / 3 + margin, row / 2 + margin,
                      (col + 1) / 3 - margin, (row + 1) / 2 - margin))

    verts_all, faces_all, uv_all, part_all = [], [], [], []
    offset = 0
    for pid, ((p0, p1, radius), rect) in enumerate(zip(parts, rects)):
        v, f, uv = _capsule_mesh(p0, p1, radius, spec.radial_segments,
                                 spec.length_segments, spec.cap_rings)
        umin, vmin, umax, vmax = rect
        uv = np.stack([umin + uv[..., 0] * (umax - umin),
                       vmin + uv[..., 1] * (vmax - vmin)], axis=-1)
        verts_all.append(v)
        faces_all.append(f + offset)
        uv_all.append(uv)
        part_all.append(np.full(len(f), pid, dtype=np.int32))
        offset += len(v)

    vertices = np.concatenate(verts_all)
    faces = np.concatenate(faces_all).astype(np.int32)
    uv = np.concatenate(uv_all)
    face_part = np.concatenate(part_all)

    # bone segments used for weight falloff; one per joint
    bones = np.array([
        [pelvis - np.array([0, 0, 0.10]), pelvis + np.array([0, 0, 0.5 * spec.torso_length])],
        [pelvis + np.array([0, 0, 0.5 * spec.torso_length]), chest],
        [neck, head_hi + np.array([0.0, 0.0, spec.head_radius])],
        [shoulder_l, shoulder_l + spec.arm_length * down],
        [shoulder_r, shoulder_r + spec.arm_length * down],
        [hip_l, hip_l + spec.leg_length * down],
        [hip_r, hip_r + spec.leg_length * down],
    ])
    weights = _falloff_weights(vertices, bones, spec.blend_radius)

    chart_joint = np.array([PELVIS, NECK, SHOULDER_L, SHOULDER_R, HIP_L, HIP_R])
    charts = np.array([[r[0], r[1], r[2], r[3], float(j)]
                       for r, j in zip(rects, chart_joint)])

    model = SkinnedBodyModel(
        template_vertices=vertices, faces=faces, uv_per_corner=uv,
        skinning_weights=weights, joints_rest=joints, parent=TOY_PARENT.copy(),
        charts=charts, face_part=face_part)
    model.validate()
    return model


def _capsule_mesh(p0, p1, radius, n_around, n_len, n_cap):
    """Watertight capsule: cylinder p0..p1 of given radius with spherical caps.

    Local uv covers [0,1]^2: u wraps around the axis, v runs pole to pole by
    arc length. uv is emitted per face corner so the u seam stays exact.
    """
    axis = p1 - p0
    length = np.linalg.norm(axis)
    zhat = axis / length
    ref = np.array([1.0, 0.0, 0.0]) if abs(zhat[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    xhat = np.cross(ref, zhat)
    xhat /= np.linalg.norm(xhat)
    yhat = np.cross(zhat, xhat)

    theta = 2.0 * np.pi * np.arange(n_around) / n_around
    circle = np.outer(np.cos(theta), xhat) + np.outer(np.sin(theta), yhat)

    rings = []      # (center, ring_radius, v_coord)
    profile = np.pi * radius / 2.0 * 2.0 + length
    arc = 0.0
    prev_phi = 0.0
    for i in range(1, n_cap + 1):                     # bottom cap
        phi = (np.pi / 2.0) * i / n_cap
        arc += radius * (phi - prev_phi)
        prev_phi = phi
        rings.append((p0 - radius * np.cos(phi) * zhat, radius * np.sin(phi), arc / profile))
    for jj in range(1, n_len + 1):                    # cylinder wall
        t = jj / n_len
        rings.append((p0 + t * axis, radius, (np.pi * radius / 2.0 + t * length) / profile))
    prev_phi = np.pi / 2.0
    arc = np.pi * radius / 2.0 + length
    for i in range(1, n_cap):                         # top cap (pole handled below)
        phi = (np.pi / 2.0) * (1.0 - i / n_cap)
        arc += radius * (prev_phi - phi)
        prev_phi = phi
        rings.append((p1 + radius * np.cos(phi) * zhat, radius * np.sin(phi), arc / profile))

    verts = [p0 - radius * zhat]
    ring_v = []
    for center, rr, vcoord in rings:
        verts.extend(center + rr * circle)
        ring_v.append(vcoord)
    verts.append(p1 + radius * zhat)
    verts = np.asarray(verts)
    top = len(verts) - 1

    def ring_idx(r, k):
        return 1 + r * n_around + (k % n_around)

    faces, uvs = [], []
    us = np.arange(n_around + 1) / n_around           # u of corner k, seam at 1.0
    for k in range(n_around):                         # bottom fan
        a, b = ring_idx(0, k), ring_idx(0, k + 1)
        faces.append((0, b, a))
        uc = 0.5 * (us[k] + us[k + 1])
        uvs.append(((uc, 0.0), (us[k + 1], ring_v[0]), (us[k], ring_v[0])))
    for r in range(len(rings) - 1):                   # wall quads
        for k in range(n_around):
            a, b = ring_idx(r, k), ring_idx(r, k + 1)
            c, d = ring_idx(r + 1, k), ring_idx(r + 1, k + 1)
            faces.append((a, b, d))
            uvs.append(((us[k], ring_v[r]), (us[k + 1], ring_v[r]), (us[k + 1], ring_v[r + 1])))
            faces.append((a, d, c))
            uvs.append(((us[k], ring_v[r]), (us[k + 1], ring_v[r + 1]), (us[k], ring_v[r + 1])))
    last = len(rings) - 1
    for k in range(n_around):                         # top fan
        a, b = ring_idx(last, k), ring_idx(last, k + 1)
        faces.append((a, b, top))
        uc = 0.5 * (us[k] + us[k + 1])
        uvs.append(((us[k], ring_v[last]), (us[k + 1], ring_v[last]), (uc, 1.0)))

    return verts, np.asarray(faces, dtype=np.int32), np.asarray(uvs)


def _falloff_weights(vertices: np.ndarray, bones: np.ndarray, s: float) -> np.ndarray:
    """Gaussian falloff to the two nearest bone segments, renormalized."""
    d = np.stack([_point_segment_distance(vertices, a, b) for a, b in bones], axis=1)
    w = np.exp(-0.5 * (d / s) ** 2)
    # keep only the two nearest bones per vertex
    keep = np.argsort(d, axis=1)[:, :2]
    mask = np.zeros_like(w)
    np.put_along_axis(mask, keep, 1.0, axis=1)
    w *= mask
    total = w.sum(axis=1, keepdims=True)
    degenerate = total[:, 0] < 1e-300
    if degenerate.any():
        # both nearest bones are far: snap to the single nearest bone
        w[degenerate] = 0.0
        w[degenerate, keep[degenerate, 0]] = 1.0
        total = w.sum(axis=1, keepdims=True)
    return w / total


def _point_segment_distance(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ab = b - a
    t = np.clip((points - a) @ ab / (ab @ ab), 0.0, 1.0)
    closest = a + t[:, None] * ab
    return np.linalg.norm(points - closest, axis=1)


# ---------------------------------------------------------------------------
# Body file format (sectioned text, versioned; see README for the layout)
# ---------------------------------------------------------------------------

_MAGIC = "SKINNED BODY v1"
_REQUIRED = ("vertices", "faces", "uv", "weights", "joints", "tree")
_OPTIONAL = ("shape_dirs", "pose_dirs", "charts", "face_part")


def save_body(model: SkinnedBodyModel, path: str | Path) -> None:
    """Write the documented sectioned text container; round-trips bit-exactly."""
    out = [_MAGIC]

    def emit(name, array, fmt, extra=""):
        arr = np.asarray(array)
        rows = arr.reshape(arr.shape[0], -1) if arr.ndim > 1 else arr.reshape(-1, 1)
        out.append(f"[{name}] count={rows.shape[0]}{extra}")
        for row in rows:
            out.append(" ".join(fmt(x) for x in row))

    ffmt = lambda x: repr(float(x))
    ifmt = lambda x: str(int(x))
    emit("vertices", model.template_vertices, ffmt)
    emit("faces", model.faces, ifmt)
    emit("uv", model.uv_per_corner, ffmt)
    emit("weights", model.skinning_weights, ffmt,
         extra=f" joints={model.num_joints}")
    emit("joints", model.joints_rest, ffmt)
    emit("tree", model.parent, ifmt)
    if model.shape_dirs is not None:
        emit("shape_dirs", model.shape_dirs.reshape(model.num_vertices, -1), ffmt,
             extra=f" dims={model.shape_dirs.shape[2]}")
    if model.pose_dirs is not None:
        emit("pose_dirs", model.pose_dirs.reshape(model.num_vertices, -1), ffmt,
             extra=f" dims={model.pose_dirs.shape[2]}")
    if model.charts is not None:
        emit("charts", model.charts, ffmt)
    if model.face_part is not None:
        emit("face_part", model.face_part, ifmt)
    out.append("[end]")
    Path(path).write_text("\n".join(out) + "\n")


def load_body(path: str | Path) -> SkinnedBodyModel:
    """Parse and validate a body file written by save_body."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines or lines[0] != _MAGIC:
        raise BodyFormatError(f"not a body file (expected header '{_MAGIC}')")

    sections: dict[str, tuple[dict, list[str]]] = {}
    i = 1
    saw_end = False
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line:
            continue
        if line == "[end]":
            saw_end = True
            break
        if not line.startswith("["):
            raise BodyFormatError(f"expected a section header, got: {line!r}")
        name, _, rest = line[1:].partition("]")
        attrs = dict(kv.split("=") for kv in rest.split())
        count = int(attrs["count"])
        if i + count > len(lines):
            raise BodyFormatError(f"truncated file: section '{name}' is incomplete")
        sections[name] = (attrs, lines[i:i + count])
        i += count
    if not saw_end:
        raise BodyFormatError("truncated file: missing [end] marker")
    for name in _REQUIRED:
        if name not in sections:
            raise BodyFormatError(f"missing section '{name}'")

    def rows(name, dtype=np.float64):
        _, body_lines = sections[name]
        return np.array([[dtype(tok) for tok in ln.split()] for ln in body_lines],
                        dtype=dtype)

    vertices = rows("vertices")
    faces = rows("faces", np.int32)
    uv = rows("uv").reshape(-1, 3, 2)
    weights = rows("weights")
    joints = rows("joints")
    parent = rows("tree", np.int32).ravel()

    shape_dirs = pose_dirs = charts = face_part = None
    if "shape_dirs" in sections:
        dims = int(sections["shape_dirs"][0]["dims"])
        shape_dirs = rows("shape_dirs").reshape(len(vertices), 3, dims)
    if "pose_dirs" in sections:
        dims = int(sections["pose_dirs"][0]["dims"])
        pose_dirs = rows("pose_dirs").reshape(len(vertices), 3, dims)
    if "charts" in sections:
        charts = rows("charts")
    if "face_part" in sections:
        face_part = rows("face_part", np.int32).ravel()

    model = SkinnedBodyModel(
        template_vertices=vertices, faces=faces, uv_per_corner=uv,
        skinning_weights=weights, joints_rest=joints, parent=parent,
        shape_dirs=shape_dirs, pose_dirs=pose_dirs,
        charts=charts, face_part=face_part)
    model.validate()
    return model
