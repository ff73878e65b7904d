"""Dataset loading, image / depth / PLY I/O, and synthetic test scenes."""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .camera import Camera, look_at
from .gaussians import GaussianCloud, inverse_sigmoid
from .rasterizer import ORACLE_SETTINGS, render
from .sh import C0, num_coeffs
from .streams import stream


class SceneIOError(ValueError):
    pass


@dataclass(frozen=True)
class View:
    camera: Camera
    image: np.ndarray           # (H, W, 3) in [0, 1]
    depth: np.ndarray | None = None
    name: str = ""


@dataclass(frozen=True)
class Dataset:
    train: tuple
    test: tuple
    scene_extent: float

    def __post_init__(self):
        if self.scene_extent <= 0:
            raise SceneIOError("scene extent must be positive")
        for split in (self.train, self.test):
            shapes = {v.image.shape for v in split}
            if len(shapes) > 1:
                raise SceneIOError(f"mixed image shapes in split: {shapes}")


# ---------------------------------------------------------------- images

def load_image(path, background=(0.0, 0.0, 0.0)) -> np.ndarray:
    """8-bit PNG to float RGB in [0,1]; alpha composited over background."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    rgb, a = arr[..., :3], arr[..., 3:4]
    bg = np.asarray(background, dtype=np.float64)
    return rgb * a + bg * (1.0 - a)


def save_image(path, image: np.ndarray):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=2)
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_depth(path) -> np.ndarray:
    """Depth map from little-endian PFM, or 16-bit PNG + JSON scale sidecar."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return _read_pfm(path)
    if path.suffix.lower() == ".png":
        with Image.open(path) as im:
            if im.mode != "I;16":
                raise SceneIOError(f"{path}: expected 16-bit grayscale PNG")
            raw = np.asarray(im, dtype=np.float64)
        sidecar = path.with_suffix(path.suffix + ".scale.json")
        if not sidecar.exists():
            raise SceneIOError(f"{path}: missing scale sidecar {sidecar.name}")
        scale = float(json.loads(sidecar.read_text())["scale"])
        return raw / 65535.0 * scale
    raise SceneIOError(f"{path}: unsupported depth format")


def save_depth_pfm(path, depth: np.ndarray):
    depth = np.asarray(depth, dtype=np.float32)
    if depth.ndim != 2:
        raise SceneIOError("depth must be a 2-d array")
    h, w = depth.shape
    with open(path, "wb") as fh:
        fh.write(b"Pf\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")                    # negative scale: little-endian
        fh.write(np.flipud(depth).astype("<f4").tobytes())


def _read_pfm(path: Path) -> np.ndarray:
    data = path.read_bytes()
    parts = data.split(b"\n", 3)
    if len(parts) < 4:
        raise SceneIOError(f"{path}: truncated PFM header")
    kind, dims, scale_s, body = parts
    if kind.strip() != b"Pf":
        raise SceneIOError(f"{path}: only single-channel 'Pf' PFM supported")
    try:
        w, h = (int(t) for t in dims.split())
        scale = float(scale_s)
    except ValueError as exc:
        raise SceneIOError(f"{path}: malformed PFM header") from exc
    if scale >= 0:
        raise SceneIOError(f"{path}: big-endian PFM not supported")
    need = w * h * 4
    if len(body) < need:
        raise SceneIOError(f"{path}: truncated PFM body "
                           f"({len(body)} of {need} bytes)")
    img = np.frombuffer(body[:need], dtype="<f4").reshape(h, w)
    return np.flipud(img).astype(np.float64)  # PFM rows are bottom-up


# ------------------------------------------------------- blender transforms

# OpenGL cameras look down -z with +y up; internally +z is forward
_AXIS_FLIP = np.diag([1.0, -1.0, -1.0])


def camera_from_c2w(c2w: np.ndarray, fx, fy, cx, cy, width, height,
                    **kw) -> Camera:
    """Internal camera from an OpenGL-convention camera-to-world matrix."""
    c2w = np.asarray(c2w, dtype=np.float64)
    R = _AXIS_FLIP @ c2w[:3, :3].T
    t = -R @ c2w[:3, 3]
    return Camera(rotation=R, translation=t, fx=fx, fy=fy, cx=cx, cy=cy,
                  width=width, height=height, **kw)


def camera_to_c2w(camera: Camera) -> np.ndarray:
    out = np.eye(4)
    out[:3, :3] = (_AXIS_FLIP @ camera.rotation).T
    out[:3, 3] = camera.center
    return out


def _load_transform_file(path: Path, background):
    try:
        meta = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SceneIOError(f"{path}: invalid JSON: {exc}") from exc
    if "camera_angle_x" not in meta:
        raise SceneIOError(f"{path}: missing camera_angle_x")
    if "frames" not in meta:
        raise SceneIOError(f"{path}: missing frames")
    views = []
    for i, frame in enumerate(meta["frames"]):
        for key in ("file_path", "transform_matrix"):
            if key not in frame:
                raise SceneIOError(f"{path}: frame {i} missing {key}")
        img_path = path.parent / frame["file_path"]
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise SceneIOError(f"{path}: frame {i} image not found: {img_path}")
        image = load_image(img_path, background=background)
        h, w = image.shape[:2]
        m = np.asarray(frame["transform_matrix"], dtype=np.float64)
        if m.shape != (4, 4) or not np.isfinite(m).all():
            raise SceneIOError(f"{path}: frame {i} has a malformed "
                               "transform_matrix")
        if abs(np.linalg.det(m[:3, :3])) < 1e-9:
            raise SceneIOError(f"{path}: frame {i} transform not invertible")
        fx = w / (2.0 * np.tan(float(meta["camera_angle_x"]) / 2.0))
        cam = camera_from_c2w(m, fx=fx, fy=fx, cx=w / 2.0, cy=h / 2.0,
                              width=w, height=h)
        views.append(View(camera=cam, image=image, name=frame["file_path"]))
    return views


def scene_extent_from_cameras(cameras) -> float:
    """Radius of the camera bounding sphere (with 10% headroom)."""
    centers = np.stack([c.center for c in cameras])
    centroid = centers.mean(axis=0)
    radius = np.linalg.norm(centers - centroid, axis=1).max()
    return float(max(radius * 1.1, 1e-6))


def load_blender_transforms(directory, background=(0.0, 0.0, 0.0)) -> Dataset:
    """Load a transforms_{train,test}.json (or flat transforms.json) scene."""
    directory = Path(directory)
    train_file = directory / "transforms_train.json"
    test_file = directory / "transforms_test.json"
    flat = directory / "transforms.json"
    if train_file.exists():
        train = _load_transform_file(train_file, background)
        test = _load_transform_file(test_file, background) if test_file.exists() else []
    elif flat.exists():
        train = _load_transform_file(flat, background)
        test = []
    else:
        raise SceneIOError(f"{directory}: no transforms json found")
    if not train:
        raise SceneIOError(f"{directory}: no training frames")
    extent = scene_extent_from_cameras([v.camera for v in train])
    return Dataset(train=tuple(train), test=tuple(test), scene_extent=extent)


# ----------------------------------------------------------------- PLY

PLY_MAGIC = b"ply"


def _ply_property_names(n_rest: int):
    names = ["x", "y", "z", "nx", "ny", "nz",
             "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def ply_bytes(cloud: GaussianCloud) -> bytes:
    """Binary little-endian PLY with the interchange field layout used by
    common splatting viewers (positions, SH features, opacity logit,
    log scales, quaternion)."""
    n = cloud.count
    nb = cloud.sh_coeffs.shape[2]
    n_rest = 3 * (nb - 1)
    names = _ply_property_names(n_rest)
    cols = [cloud.means,
            np.zeros((n, 3)),
            cloud.sh_coeffs[:, :, 0]]
    if n_rest:
        cols.append(cloud.sh_coeffs[:, :, 1:].reshape(n, n_rest))
    cols += [cloud.opacity_logits[:, None], cloud.log_scales, cloud.rotations]
    table = np.concatenate(cols, axis=1).astype("<f4")
    header = ["ply", "format binary_little_endian 1.0",
              f"comment scene_extent {cloud.scene_extent!r}",
              f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    return ("\n".join(header) + "\n").encode("ascii") + table.tobytes()


def ply_write(cloud: GaussianCloud, path):
    Path(path).write_bytes(ply_bytes(cloud))


def ply_read(path) -> GaussianCloud:
    return ply_from_bytes(Path(path).read_bytes(), label=str(path))


def ply_from_bytes(data: bytes, label: str = "<bytes>") -> GaussianCloud:
    path = label
    if not data.startswith(PLY_MAGIC):
        raise SceneIOError(f"{path}: not a PLY file")
    end = data.find(b"end_header\n")
    if end < 0:
        raise SceneIOError(f"{path}: missing end_header")
    body = data[end + len(b"end_header\n"):]
    lines = data[:end].decode("ascii", errors="replace").splitlines()
    n = None
    props = []
    extent = 1.0
    for line in lines:
        if line.startswith("format") and "binary_little_endian" not in line:
            raise SceneIOError(f"{path}: only binary_little_endian supported")
        if line.startswith("comment scene_extent"):
            extent = float(line.split()[-1])
        if line.startswith("element vertex"):
            n = int(line.split()[-1])
        if line.startswith("property"):
            kind, name = line.split()[1:3]
            if kind != "float":
                raise SceneIOError(f"{path}: property {name} is {kind}, "
                                   "expected float")
            props.append(name)
    if n is None:
        raise SceneIOError(f"{path}: missing vertex element")
    n_rest = sum(1 for p in props if p.startswith("f_rest_"))
    expected = _ply_property_names(n_rest)
    missing = [p for p in expected if p not in props]
    if missing:
        raise SceneIOError(f"{path}: missing properties: {missing}")
    if len(body) < n * len(props) * 4:
        raise SceneIOError(f"{path}: truncated body "
                           f"({len(body)} of {n * len(props) * 4} bytes)")
    table = np.frombuffer(body[:n * len(props) * 4],
                          dtype="<f4").reshape(n, len(props))
    col = {name: table[:, i] for i, name in enumerate(props)}
    if n_rest % 3 != 0:
        raise SceneIOError(f"{path}: f_rest count {n_rest} not divisible by 3")
    nb = 1 + n_rest // 3
    sh = np.zeros((n, 3, nb))
    for c in range(3):
        sh[:, c, 0] = col[f"f_dc_{c}"]
        for j in range(nb - 1):
            sh[:, c, 1 + j] = col[f"f_rest_{c * (nb - 1) + j}"]
    return GaussianCloud(
        means=np.stack([col["x"], col["y"], col["z"]], axis=1).astype(np.float64),
        log_scales=np.stack([col[f"scale_{i}"] for i in range(3)], axis=1).astype(np.float64),
        rotations=np.stack([col[f"rot_{i}"] for i in range(4)], axis=1).astype(np.float64),
        opacity_logits=col["opacity"].astype(np.float64),
        sh_coeffs=sh,
        scene_extent=extent,
    )


# ------------------------------------------------------- synthetic scenes

@dataclass(frozen=True)
class SyntheticSceneSpec:
    kind: str = "gaussian-soup"       # or "textured-cuboid"
    n_primitives: int = 120
    train_views: int = 3
    test_views: int = 25
    resolution: int = 64
    seed: int = 0
    sh_degree: int = 1
    camera_radius: float = 3.0
    arc_degrees: float = 360.0        # azimuth sector shared by all cameras

    def __post_init__(self):
        if self.kind not in ("gaussian-soup", "textured-cuboid"):
            raise SceneIOError(f"unknown synthetic scene kind {self.kind!r}")
        if self.train_views < 1 or self.test_views < 1:
            raise SceneIOError("view counts must be at least 1")
        if self.resolution < 8:
            raise SceneIOError("resolution must be at least 8")
        if self.n_primitives < 1:
            raise SceneIOError("need at least one primitive")
        if not 0.0 < self.arc_degrees <= 360.0:
            raise SceneIOError("arc_degrees must be in (0, 360]")


def parse_synthetic_spec(text: str) -> SyntheticSceneSpec:
    """Parse 'key=value,key=value' CLI shorthand (e.g. 'kind=gaussian-soup,
    n_primitives=100,seed=3'); empty string gives the defaults."""
    kw = {}
    if text.strip():
        for item in text.split(","):
            if "=" not in item:
                raise SceneIOError(f"bad synthetic spec item {item!r}")
            key, value = item.split("=", 1)
            key = key.strip()
            if key == "kind":
                kw[key] = value.strip()
            elif key in ("camera_radius", "arc_degrees"):
                kw[key] = float(value)
            else:
                kw[key] = int(value)
    try:
        return SyntheticSceneSpec(**kw)
    except TypeError as exc:
        raise SceneIOError(f"bad synthetic spec: {exc}") from exc


def _soup_cloud(spec: SyntheticSceneSpec, rng) -> GaussianCloud:
    n = spec.n_primitives
    means = rng.uniform(-1.0, 1.0, size=(n, 3))
    log_scales = np.log(rng.uniform(0.06, 0.18, size=(n, 3)))
    rotations = rng.standard_normal((n, 4))
    opacity = rng.uniform(0.5, 0.95, size=n)
    nb = num_coeffs(spec.sh_degree)
    sh = np.zeros((n, 3, nb))
    sh[:, :, 0] = (rng.uniform(0.05, 0.95, size=(n, 3)) - 0.5) / C0
    if nb > 1:
        sh[:, :, 1:] = rng.uniform(-0.2, 0.2, size=(n, 3, nb - 1))
    return GaussianCloud(means=means, log_scales=log_scales,
                         rotations=rotations,
                         opacity_logits=inverse_sigmoid(opacity),
                         sh_coeffs=sh, scene_extent=1.0)


def _cuboid_cloud(spec: SyntheticSceneSpec, rng) -> GaussianCloud:
    """Gaussians sampled on the faces of a checker-textured box."""
    n = spec.n_primitives
    face = rng.integers(0, 6, size=n)
    uv = rng.uniform(-1.0, 1.0, size=(n, 2))
    means = np.zeros((n, 3))
    axis = face // 2
    sign = np.where(face % 2 == 0, 1.0, -1.0)
    others = np.array([[1, 2], [0, 2], [0, 1]])
    for i in range(n):
        a, (b, c) = axis[i], others[axis[i]]
        means[i, a] = 0.8 * sign[i]
        means[i, b], means[i, c] = 0.8 * uv[i]
    checker = ((np.floor(uv[:, 0] * 4) + np.floor(uv[:, 1] * 4)) % 2).astype(bool)
    base = np.where(checker[:, None],
                    np.array([[0.9, 0.85, 0.2]]), np.array([[0.15, 0.25, 0.8]]))
    colors = np.clip(base + rng.normal(0, 0.02, size=(n, 3)), 0.02, 0.98)
    nb = num_coeffs(spec.sh_degree)
    sh = np.zeros((n, 3, nb))
    sh[:, :, 0] = (colors - 0.5) / C0
    log_scales = np.log(rng.uniform(0.08, 0.16, size=(n, 3)))
    return GaussianCloud(means=means, log_scales=log_scales,
                         rotations=rng.standard_normal((n, 4)),
                         opacity_logits=inverse_sigmoid(
                             rng.uniform(0.6, 0.95, size=n)),
                         sh_coeffs=sh, scene_extent=1.0)


def _orbit_camera(theta: float, phi: float, spec: SyntheticSceneSpec) -> Camera:
    r = spec.camera_radius
    eye = np.array([r * np.cos(phi) * np.cos(theta),
                    r * np.sin(phi),
                    r * np.cos(phi) * np.sin(theta)])
    res = spec.resolution
    f = 1.2 * res
    return look_at(eye, np.zeros(3), (0.0, 1.0, 0.0), fx=f, fy=f,
                   cx=res / 2.0, cy=res / 2.0, width=res, height=res)


def generate_synthetic_scene(spec: SyntheticSceneSpec):
    """Self-rendered toy scene; returns (Dataset, ground-truth cloud).

    Ground truth is exactly representable by the model class because the
    images come from this package's own renderer in 64-bit mode.  Train and
    test cameras sit at interleaved, never-equal azimuths on an orbit.
    """
    rng = stream(spec.seed, "scene", 0)
    cloud = _soup_cloud(spec, rng) if spec.kind == "gaussian-soup" \
        else _cuboid_cloud(spec, rng)

    # train at K evenly spaced azimuths across the camera sector; test on a
    # finer grid shifted by a third of its step so the two sets stay
    # disjoint (any residual exact collision is nudged below)
    arc = np.deg2rad(spec.arc_degrees)
    if spec.arc_degrees >= 360.0:
        train_thetas = np.linspace(0.0, 2 * np.pi, spec.train_views,
                                   endpoint=False)
    elif spec.train_views > 1:
        train_thetas = np.linspace(0.0, arc, spec.train_views)
    else:
        train_thetas = np.array([arc / 2.0])
    step = arc / spec.test_views
    test_thetas = np.linspace(0.0, arc, spec.test_views,
                              endpoint=False) + step / 3.0
    for k, theta in enumerate(test_thetas):
        if np.any(theta == train_thetas):
            test_thetas[k] += step / 7.0
    phis = [0.35, 0.15, 0.5]

    def make_views(thetas, phi_offset):
        views = []
        for i, theta in enumerate(thetas):
            cam = _orbit_camera(theta, phis[(i + phi_offset) % len(phis)], spec)
            out = render(cloud, cam, settings=ORACLE_SETTINGS)
            views.append(View(camera=cam, image=np.asarray(out.color),
                              depth=np.asarray(out.depth),
                              name=f"view_{theta:.4f}"))
        return tuple(views)

    train = make_views(train_thetas, 0)
    test = make_views(test_thetas, 1)
    extent = scene_extent_from_cameras([v.camera for v in train])
    return Dataset(train=train, test=test, scene_extent=extent), cloud
