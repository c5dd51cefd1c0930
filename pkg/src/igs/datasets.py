"""Scenes on disk, synthetic ground truth, image IO and quality metrics.

A dataset directory holds ``cameras.json``, ``points.txt`` (``x y z r g b`` per
line) and one binary PPM per camera. Synthetic scenes additionally keep the
generating mixture in ``gaussians.txt`` so every image can be re-rendered.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .diffcore import DTYPE
from .errors import MissingAssetError, ValidationError
from .losses import ssim
from .render import Camera, Gaussians, render_image

PSNR_SENTINEL = 99.0


# -- image IO ----------------------------------------------------------------

def quantize(img: torch.Tensor) -> np.ndarray:
    return np.clip(np.round(img.detach().cpu().numpy() * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, img):
    """Write an (H, W, 3) float image in [0, 1] (or uint8 array) as binary P6."""
    arr = img if isinstance(img, np.ndarray) and img.dtype == np.uint8 else quantize(torch.as_tensor(img))
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_ppm(path) -> torch.Tensor:
    path = Path(path)
    if not path.is_file():
        raise MissingAssetError(f"image file not found: {path.name}")
    data = path.read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValidationError(f"{path.name}: truncated PPM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P6" or tokens[3] != b"255":
        raise ValidationError(f"{path.name}: only binary P6 with maxval 255 is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = data[pos + 1:]
    if len(pixels) != w * h * 3:
        raise ValidationError(f"{path.name}: expected {w * h * 3} pixel bytes, found {len(pixels)}")
    arr = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w, 3)
    return torch.from_numpy(arr.astype(np.float64) / 255.0)


# -- metrics -----------------------------------------------------------------

def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """10 log10(1 / MSE) in dB; identical images give the 99 dB sentinel."""
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    mse = float(((a - b) ** 2).mean())
    if mse == 0:
        return PSNR_SENTINEL
    return 10.0 * math.log10(1.0 / mse)


def downsample(img: torch.Tensor, scale: float) -> torch.Tensor:
    """Bilinear resize of an (H, W, 3) image by ``scale`` (pixel-center aligned, no prefilter)."""
    if scale == 1:
        return img
    h, w = img.shape[:2]
    size = (max(1, int(round(h * scale))), max(1, int(round(w * scale))))
    x = img.permute(2, 0, 1)[None]
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False, antialias=False)
    return out[0].permute(1, 2, 0)


# -- datasets ----------------------------------------------------------------

@dataclass
class Dataset:
    cameras: list
    images: list
    image_names: list
    points: np.ndarray
    point_colors: np.ndarray
    bbox: np.ndarray
    background: tuple = (0.0, 0.0, 0.0)
    mixture: Gaussians | None = None
    train_ids: list = field(default_factory=list)
    test_ids: list = field(default_factory=list)

    def __post_init__(self):
        if not self.train_ids and not self.test_ids:
            self.test_ids = [i for i in range(len(self.cameras)) if i % 8 == 0]
            self.train_ids = [i for i in range(len(self.cameras)) if i % 8 != 0]

    @property
    def scene_radius(self) -> float:
        return float(np.linalg.norm(self.bbox[1] - self.bbox[0]) / 2)

    def validate(self):
        if len(self.train_ids) < 2 or len(self.test_ids) < 1:
            raise ValidationError("dataset needs at least 2 train and 1 test view")
        for cam, img, name in zip(self.cameras, self.images, self.image_names):
            cam.validate()
            if tuple(img.shape) != (cam.height, cam.width, 3):
                raise ValidationError(f"{name}: image is {tuple(img.shape[:2])}, camera expects {(cam.height, cam.width)}")
        if len(self.points) and ((self.points < self.bbox[0]).any() or (self.points > self.bbox[1]).any()):
            raise ValidationError("initialization points fall outside the bounding box")
        return self


def bbox_from_points(points: np.ndarray, pad: float = 0.1) -> np.ndarray:
    lo, hi = points.min(axis=0), points.max(axis=0)
    margin = pad * (hi - lo).max() + 0.05
    return np.stack([lo - margin, hi + margin])


def look_at(eye, target=(0.0, 0.0, 0.0)):
    """World-to-camera (R, t), camera looking down +z with y pointing down the image."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    up = np.array([0.0, 0.0, 1.0])
    if abs(fwd @ up) > 0.99:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ eye


def fibonacci_sphere(n: int, radius: float, phase: float) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    theta = math.pi * (3 - math.sqrt(5)) * i + phase
    return radius * np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)


def sample_mixture(rng: np.random.Generator, n_gauss: int) -> Gaussians:
    q = rng.normal(size=(n_gauss, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    t = lambda a: torch.as_tensor(a, dtype=DTYPE)
    return Gaussians(
        means=t(rng.uniform(-0.5, 0.5, size=(n_gauss, 3))),
        scales=t(rng.uniform(0.02, 0.1, size=(n_gauss, 3))),
        quats=t(q),
        opacities=t(rng.uniform(0.5, 1.0, size=n_gauss)),
        colors=t(rng.uniform(0.0, 1.0, size=(n_gauss, 3))),
    )


def gen_synthetic_scene(seed: int, n_gauss: int, n_cams: int, res=(64, 64), out=None,
                        points_per_gaussian: int = 8, focal_scale: float = 1.25) -> Dataset:
    """Random Gaussian mixture in the unit cube seen by cameras on a radius-3 sphere.

    Ground truth comes from this package's renderer, so the target is exactly
    representable. Fully deterministic in ``seed``.
    """
    if n_gauss < 1 or n_cams < 3:
        raise ValidationError("need n_gauss >= 1 and n_cams >= 3")
    width, height = res
    rng = np.random.default_rng(seed)
    mixture = sample_mixture(rng, n_gauss)

    cams = []
    for eye in fibonacci_sphere(n_cams, 3.0, rng.uniform(0, 2 * math.pi)):
        R, t = look_at(eye)
        f = focal_scale * width
        cams.append(Camera(R, t, f, f, width / 2, height / 2, width, height))

    # noisy samples drawn from each mixture component
    from .render import build_covariance
    cov = build_covariance(mixture.scales, mixture.quats).numpy()
    chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
    pts, cols = [], []
    for j in range(n_gauss):
        z = rng.normal(size=(points_per_gaussian, 3))
        pts.append(mixture.means[j].numpy() + z @ chol[j].T + rng.normal(scale=0.005, size=(points_per_gaussian, 3)))
        cols.append(np.repeat(mixture.colors[j].numpy()[None], points_per_gaussian, axis=0))
    points, colors = np.concatenate(pts), np.concatenate(cols)

    images = [torch.as_tensor(quantize(render_image(mixture, c)), dtype=DTYPE) / 255.0 for c in cams]
    names = [f"images/view_{i:03d}.ppm" for i in range(n_cams)]
    ds = Dataset(cams, images, names, points, colors, bbox_from_points(points), mixture=mixture)
    if out is not None:
        save_dataset(ds, out)
    return ds


def _fmt(x) -> str:
    return repr(float(x))


def save_dataset(ds: Dataset, out):
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    for cam, img, name in zip(ds.cameras, ds.images, ds.image_names):
        w2c = torch.cat([cam.R, cam.t[:, None]], dim=1).reshape(-1)
        records.append({
            "world_to_camera": [float(v) for v in w2c],
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height, "z_near": cam.z_near,
            "image": name,
        })
        write_ppm(out / name, quantize(img))
    doc = {"background": list(ds.background), "cameras": records}
    (out / "cameras.json").write_text(json.dumps(doc, indent=1) + "\n")
    with open(out / "points.txt", "w") as fh:
        for p, c in zip(ds.points, ds.point_colors):
            fh.write(" ".join(_fmt(v) for v in (*p, *c)) + "\n")
    if ds.mixture is not None:
        m = ds.mixture
        with open(out / "gaussians.txt", "w") as fh:
            fh.write("# mx my mz sx sy sz qw qx qy qz opacity r g b\n")
            for i in range(len(m)):
                row = [*m.means[i], *m.scales[i], *m.quats[i], m.opacities[i], *m.colors[i]]
                fh.write(" ".join(_fmt(v) for v in row) + "\n")


def _read_table(path, width, what):
    rows = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != width:
            raise ValidationError(f"{what} line {lineno}: expected {width} values, got {len(parts)}")
        try:
            rows.append([float(v) for v in parts])
        except ValueError as exc:
            raise ValidationError(f"{what} line {lineno}: non-numeric value") from exc
    return np.asarray(rows, dtype=np.float64).reshape(-1, width)


def load_dataset(path) -> Dataset:
    path = Path(path)
    cam_file = path / "cameras.json"
    if not cam_file.is_file():
        raise MissingAssetError(f"missing cameras.json in {path}")
    try:
        doc = json.loads(cam_file.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"cameras.json: {exc}") from exc
    records = doc["cameras"] if isinstance(doc, dict) else doc
    cams, images, names = [], [], []
    for i, rec in enumerate(records):
        try:
            w2c = np.asarray(rec["world_to_camera"], dtype=np.float64).reshape(3, 4)
            cam = Camera(w2c[:, :3], w2c[:, 3], float(rec["fx"]), float(rec["fy"]), float(rec["cx"]),
                         float(rec["cy"]), int(rec["width"]), int(rec["height"]), float(rec.get("z_near", 0.01)))
            name = str(rec["image"])
        except (KeyError, ValueError, TypeError) as exc:
            raise ValidationError(f"camera {i}: malformed record ({exc})") from exc
        try:
            cam.validate()
        except ValidationError as exc:
            raise ValidationError(f"camera {i}: {exc.args[0]}") from exc
        img = read_ppm(path / name)
        if tuple(img.shape) != (cam.height, cam.width, 3):
            raise ValidationError(f"camera {i}: image {name} is {img.shape[1]}x{img.shape[0]}, "
                                  f"expected {cam.width}x{cam.height}")
        cams.append(cam)
        images.append(img)
        names.append(name)
    pts_file = path / "points.txt"
    if not pts_file.is_file():
        raise MissingAssetError(f"missing points.txt in {path}")
    table = _read_table(pts_file, 6, "points.txt")
    mixture = None
    if (path / "gaussians.txt").is_file():
        g = torch.as_tensor(_read_table(path / "gaussians.txt", 14, "gaussians.txt"), dtype=DTYPE)
        mixture = Gaussians(g[:, 0:3], g[:, 3:6], g[:, 6:10], g[:, 10], g[:, 11:14])
    background = tuple(float(v) for v in doc.get("background", (0.0, 0.0, 0.0))) if isinstance(doc, dict) else (0.0, 0.0, 0.0)
    ds = Dataset(cams, images, names, table[:, :3], table[:, 3:], bbox_from_points(table[:, :3]),
                 background=background, mixture=mixture)
    return ds.validate()


# -- evaluation --------------------------------------------------------------

def evaluate(model, dataset: Dataset, level: int, scale: float, cull_sigma: float = 3.0) -> dict:
    """PSNR/SSIM of ``model`` on the held-out views at ``scale`` times full resolution."""
    if not dataset.test_ids:
        raise ValidationError("dataset has an empty test split")
    per_view = []
    for i in dataset.test_ids:
        cam = dataset.cameras[i].scaled(scale)
        gt = downsample(dataset.images[i], scale)
        with torch.no_grad():
            img = model.render(cam, dataset.background, cull_sigma)
        per_view.append({"view": i, "psnr": psnr(img, gt), "ssim": float(ssim(img, gt))})
    return {
        "level": level,
        "scale": scale,
        "views": per_view,
        "psnr": float(np.mean([v["psnr"] for v in per_view])),
        "ssim": float(np.mean([v["ssim"] for v in per_view])),
    }


def background_psnr(dataset: Dataset, scale: float = 1.0) -> float:
    """Mean held-out PSNR of an image filled with the background color."""
    vals = []
    for i in dataset.test_ids:
        gt = downsample(dataset.images[i], scale)
        bg = torch.as_tensor(dataset.background, dtype=DTYPE).expand_as(gt)
        vals.append(psnr(bg, gt))
    return float(np.mean(vals))


def write_eval_csv(path, results: list[dict]):
    """One row per level; one PSNR column per held-out view plus the means."""
    views = [v["view"] for v in results[0]["views"]] if results else []
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["level", "scale"] + [f"psnr_view{v}" for v in views] + ["mean_psnr", "mean_ssim"])
        for r in results:
            w.writerow([r["level"], repr(r["scale"])] + [f"{v['psnr']:.6f}" for v in r["views"]]
                       + [f"{r['psnr']:.6f}", f"{r['ssim']:.6f}"])
