"""Scene, camera and frame types shared by the renderer, the SLAM loop and the simulator.

Gaussians are held as a struct-of-arrays :class:`Scene` for vectorized work;
:class:`Gaussian3D` is the single-primitive view used at API boundaries and in
the text scene format.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

TILE_SIZE = 16
SUBTILE_SIZE = 4

QUAT_TOL = 1e-6


# ---------------------------------------------------------------------------
# rotation helpers (quaternions are (w, x, y, z))


def quat_to_rotmat(q) -> np.ndarray:
    """Rotation matrix of a unit quaternion; accepts (..., 4) arrays."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotmat_to_quat(R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * np.sqrt(tr + 1.0)
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = 2.0 * np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def quat_mul(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_exp(omega) -> np.ndarray:
    """Unit quaternion of the rotation vector ``omega`` (axis * angle)."""
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.linalg.norm(omega, axis=-1, keepdims=True)
    half = 0.5 * theta
    # sin(x/2)/x -> 1/2 as x -> 0
    k = np.where(theta > 1e-12, np.sin(half) / np.where(theta > 1e-12, theta, 1.0), 0.5)
    return np.concatenate([np.cos(half), k * omega], axis=-1)


def so3_exp(omega) -> np.ndarray:
    return quat_to_rotmat(quat_exp(omega))


def skew(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S


_GENERATORS = skew(np.eye(3))


def rotation_tangent_grad(grad_sigma: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. a left rotation perturbation ``Sigma -> Exp(w) Sigma Exp(w)^T``.

    ``grad_sigma`` and ``sigma`` are (..., 3, 3); returns (..., 3).
    """
    out = np.empty(sigma.shape[:-2] + (3,))
    for i in range(3):
        E = _GENERATORS[i]
        d = E @ sigma - sigma @ E
        out[..., i] = np.sum(grad_sigma * d, axis=(-2, -1))
    return out


# ---------------------------------------------------------------------------
# Gaussians


@dataclass
class Gaussian3D:
    id: int
    mean: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray
    opacity: float
    color: np.ndarray
    masked: bool = False
    mask_age: int = 0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.color = np.asarray(self.color, dtype=np.float64)
        self.opacity = float(self.opacity)

    def validate(self) -> None:
        if not np.all(self.scale > 0):
            raise ValueError(f"gaussian {self.id}: scale must be positive, got {self.scale}")
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_TOL:
            raise ValueError(f"gaussian {self.id}: rotation is not a unit quaternion")
        if not 0.0 <= self.opacity <= 1.0:
            raise ValueError(f"gaussian {self.id}: opacity {self.opacity} outside [0, 1]")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError(f"gaussian {self.id}: color outside [0, 1]")


def reconstruct_covariance(g: Gaussian3D) -> np.ndarray:
    """Covariance ``R S S^T R^T`` from the factored scale/rotation of ``g``."""
    R = quat_to_rotmat(g.rotation)
    M = R * g.scale[None, :]
    cov = M @ M.T
    return 0.5 * (cov + cov.T)


def covariances(rotations: np.ndarray, scales: np.ndarray) -> np.ndarray:
    R = quat_to_rotmat(rotations)
    M = R * scales[:, None, :]
    cov = M @ np.swapaxes(M, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass
class Scene:
    """Struct-of-arrays container for a set of 3D Gaussians.

    ``next_id`` counts every Gaussian ever created in this scene, so
    ids are never reused after removal.
    """

    ids: np.ndarray
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    masked: np.ndarray
    mask_age: np.ndarray
    next_id: int = 0

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(-1)
        n = self.ids.size
        self.means = np.asarray(self.means, dtype=np.float64).reshape(n, 3)
        self.scales = np.asarray(self.scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacities = np.asarray(self.opacities, dtype=np.float64).reshape(n)
        self.colors = np.asarray(self.colors, dtype=np.float64).reshape(n, 3)
        self.masked = np.asarray(self.masked, dtype=bool).reshape(n)
        self.mask_age = np.asarray(self.mask_age, dtype=np.int64).reshape(n)
        if n:
            self.next_id = max(int(self.next_id), int(self.ids.max()) + 1)

    @classmethod
    def empty(cls) -> "Scene":
        return cls(
            ids=np.zeros(0, np.int64),
            means=np.zeros((0, 3)),
            scales=np.zeros((0, 3)),
            rotations=np.zeros((0, 4)),
            opacities=np.zeros(0),
            colors=np.zeros((0, 3)),
            masked=np.zeros(0, bool),
            mask_age=np.zeros(0, np.int64),
        )

    @classmethod
    def from_arrays(cls, means, scales, rotations, opacities, colors, ids=None) -> "Scene":
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        if ids is None:
            ids = np.arange(n)
        return cls(
            ids=ids,
            means=means,
            scales=scales,
            rotations=rotations,
            opacities=opacities,
            colors=colors,
            masked=np.zeros(n, bool),
            mask_age=np.zeros(n, np.int64),
        )

    @classmethod
    def from_gaussians(cls, gaussians) -> "Scene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            ids=[g.id for g in gaussians],
            means=[g.mean for g in gaussians],
            scales=[g.scale for g in gaussians],
            rotations=[g.rotation for g in gaussians],
            opacities=[g.opacity for g in gaussians],
            colors=[g.color for g in gaussians],
            masked=[g.masked for g in gaussians],
            mask_age=[g.mask_age for g in gaussians],
        )

    def __len__(self) -> int:
        return int(self.ids.size)

    def __getitem__(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            id=int(self.ids[i]),
            mean=self.means[i].copy(),
            scale=self.scales[i].copy(),
            rotation=self.rotations[i].copy(),
            opacity=float(self.opacities[i]),
            color=self.colors[i].copy(),
            masked=bool(self.masked[i]),
            mask_age=int(self.mask_age[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def copy(self) -> "Scene":
        return Scene(
            ids=self.ids.copy(),
            means=self.means.copy(),
            scales=self.scales.copy(),
            rotations=self.rotations.copy(),
            opacities=self.opacities.copy(),
            colors=self.colors.copy(),
            masked=self.masked.copy(),
            mask_age=self.mask_age.copy(),
            next_id=self.next_id,
        )

    def subset(self, keep: np.ndarray) -> "Scene":
        keep = np.asarray(keep)
        return Scene(
            ids=self.ids[keep],
            means=self.means[keep],
            scales=self.scales[keep],
            rotations=self.rotations[keep],
            opacities=self.opacities[keep],
            colors=self.colors[keep],
            masked=self.masked[keep],
            mask_age=self.mask_age[keep],
            next_id=self.next_id,
        )

    def append(self, means, scales, rotations, opacities, colors) -> np.ndarray:
        """Add new Gaussians in place; returns the ids assigned to them."""
        means = np.asarray(means, dtype=np.float64).reshape(-1, 3)
        n = len(means)
        new_ids = np.arange(self.next_id, self.next_id + n, dtype=np.int64)
        self.ids = np.concatenate([self.ids, new_ids])
        self.means = np.concatenate([self.means, means])
        self.scales = np.concatenate([self.scales, np.asarray(scales, np.float64).reshape(n, 3)])
        self.rotations = np.concatenate([self.rotations, np.asarray(rotations, np.float64).reshape(n, 4)])
        self.opacities = np.concatenate([self.opacities, np.asarray(opacities, np.float64).reshape(n)])
        self.colors = np.concatenate([self.colors, np.asarray(colors, np.float64).reshape(n, 3)])
        self.masked = np.concatenate([self.masked, np.zeros(n, bool)])
        self.mask_age = np.concatenate([self.mask_age, np.zeros(n, np.int64)])
        self.next_id += n
        return new_ids

    def covariances(self) -> np.ndarray:
        return covariances(self.rotations, self.scales)

    def validate(self) -> None:
        for g in self:
            g.validate()


# ---------------------------------------------------------------------------
# cameras and frames


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics at the native resolution ``width`` x ``height``."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def scaled(self, width: int, height: int) -> "Intrinsics":
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)


@dataclass
class CameraPose:
    """World-to-camera transform ``p_cam = R(rotation) p_world + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    intrinsics: Intrinsics

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if abs(np.linalg.norm(self.rotation) - 1.0) > QUAT_TOL:
            raise ValueError("pose rotation is not a unit quaternion")
        if self.intrinsics.fx <= 0 or self.intrinsics.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def R(self) -> np.ndarray:
        return quat_to_rotmat(self.rotation)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.R.T @ self.translation

    def perturbed(self, delta: np.ndarray) -> "CameraPose":
        """Left-perturb by the tangent 6-vector ``(rot, trans)``."""
        delta = np.asarray(delta, dtype=np.float64)
        dq = quat_exp(delta[:3])
        q = quat_mul(dq, self.rotation)
        q = q / np.linalg.norm(q)
        t = quat_to_rotmat(dq) @ self.translation + delta[3:]
        return replace(self, rotation=q, translation=t)

    @classmethod
    def look_at(cls, eye, target, intrinsics: Intrinsics, up=(0.0, -1.0, 0.0)) -> "CameraPose":
        """Camera at ``eye`` looking at ``target``; image y points along ``-up``."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        R = np.stack([x, y, z])
        return cls(rotmat_to_quat(R), -R @ eye, intrinsics)


@dataclass
class TileLayout:
    width: int
    height: int
    tile_size: int = TILE_SIZE
    subtile_size: int = SUBTILE_SIZE

    def __post_init__(self):
        if self.tile_size % self.subtile_size:
            raise ValueError("tile size must be a multiple of the subtile size")

    @property
    def tiles_x(self) -> int:
        return -(-self.width // self.tile_size)

    @property
    def tiles_y(self) -> int:
        return -(-self.height // self.tile_size)

    @property
    def num_tiles(self) -> int:
        return self.tiles_x * self.tiles_y

    @property
    def subtiles_x(self) -> int:
        return -(-self.width // self.subtile_size)

    @property
    def subtiles_y(self) -> int:
        return -(-self.height // self.subtile_size)

    @property
    def num_subtiles(self) -> int:
        return self.subtiles_x * self.subtiles_y

    def tile_of(self, i: int, j: int) -> int:
        return (i // self.tile_size) * self.tiles_x + j // self.tile_size

    def subtile_of(self, i: int, j: int) -> int:
        return (i // self.subtile_size) * self.subtiles_x + j // self.subtile_size

    def tile_origin(self, tile: int) -> tuple[int, int]:
        ty, tx = divmod(tile, self.tiles_x)
        return ty * self.tile_size, tx * self.tile_size


@dataclass
class FrameState:
    frame_index: int
    is_keyframe: bool
    resolution: tuple[int, int]
    observed_color: np.ndarray
    observed_depth: np.ndarray
    pose: CameraPose
    last_keyframe_index: int = 0

    def __post_init__(self):
        w, h = self.resolution
        if self.observed_color.shape != (h, w, 3) or self.observed_depth.shape != (h, w):
            raise ValueError(
                f"buffers {self.observed_color.shape}/{self.observed_depth.shape} do not match resolution {w}x{h}"
            )

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]


def downsample_frame(color: np.ndarray, depth: np.ndarray, divisor: int) -> tuple[np.ndarray, np.ndarray]:
    """Decimate buffers by a per-axis ``divisor``.

    Pixel ``(i, j)`` of the result is pixel ``(i*d, j*d)`` of the input, which is
    exactly the sampling grid of intrinsics scaled by ``1/d``.  Because the splat
    footprint regularizer is fixed in native pixels, a render at ``1/d`` equals
    the decimated native render.
    """
    if divisor == 1:
        return color, depth
    return color[::divisor, ::divisor].copy(), depth[::divisor, ::divisor].copy()


# ---------------------------------------------------------------------------
# file formats

SCENE_MAGIC = "GSCENE"
FRAME_MAGIC = "GFRAME"


def _fmt(x: float) -> str:
    return repr(float(x))


def write_scene(path, scene: Scene) -> None:
    lines = [f"{SCENE_MAGIC} v1 {len(scene)}"]
    for i in range(len(scene)):
        vals = [
            *scene.means[i],
            *scene.scales[i],
            *scene.rotations[i],
            scene.opacities[i],
            *scene.colors[i],
        ]
        lines.append(f"{int(scene.ids[i])} " + " ".join(_fmt(v) for v in vals))
    Path(path).write_text("\n".join(lines) + "\n")


def read_scene(path) -> Scene:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise ValueError(f"{path}: empty scene file")
    head = lines[0].split()
    if len(head) != 3 or head[0] != SCENE_MAGIC or head[1] != "v1":
        raise ValueError(f"{path}: bad scene header {lines[0]!r}")
    count = int(head[2])
    body = [ln for ln in lines[1:] if ln.strip()]
    if len(body) != count:
        raise ValueError(f"{path}: header says {count} gaussians, found {len(body)}")
    if count == 0:
        return Scene.empty()
    rows = [ln.split() for ln in body]
    if any(len(r) != 15 for r in rows):
        raise ValueError(f"{path}: every gaussian line needs 15 fields")
    ids = np.array([int(r[0]) for r in rows], dtype=np.int64)
    vals = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return Scene(
        ids=ids,
        means=vals[:, 0:3],
        scales=vals[:, 3:6],
        rotations=vals[:, 6:10],
        opacities=vals[:, 10],
        colors=vals[:, 11:14],
        masked=np.zeros(count, bool),
        mask_age=np.zeros(count, np.int64),
    )


def write_frame(path, color: np.ndarray, depth: np.ndarray) -> None:
    """Write color in [0,1] as 8-bit RGB rows followed by float32 little-endian depth."""
    h, w = depth.shape
    rgb = np.clip(np.rint(np.asarray(color) * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"{FRAME_MAGIC} v1 {w} {h}\n".encode("ascii"))
        f.write(rgb.reshape(h, w, 3).tobytes())
        f.write(np.asarray(depth, dtype="<f4").tobytes())


def read_frame(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    head = data[:nl].decode("ascii").split()
    if len(head) != 4 or head[0] != FRAME_MAGIC or head[1] != "v1":
        raise ValueError(f"{path}: bad frame header")
    w, h = int(head[2]), int(head[3])
    off = nl + 1
    n_rgb = w * h * 3
    n_depth = w * h * 4
    if len(data) != off + n_rgb + n_depth:
        raise ValueError(f"{path}: expected {n_rgb + n_depth} payload bytes, found {len(data) - off}")
    rgb = np.frombuffer(data, dtype=np.uint8, count=n_rgb, offset=off).reshape(h, w, 3)
    depth = np.frombuffer(data, dtype="<f4", count=w * h, offset=off + n_rgb).reshape(h, w)
    return rgb.astype(np.float64) / 255.0, depth.astype(np.float64)


def frame_header(path) -> tuple[int, int]:
    with open(path, "rb") as f:
        head = f.readline().decode("ascii").split()
    return int(head[2]), int(head[3])

