"""Reference per-pixel Gaussian rasterizer.

Projection uses the local affine (EWA) approximation, compositing is
front-to-back over a global depth order. Everything is plain torch so the
backward pass comes from autograd.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .diffcore import DTYPE
from .errors import ValidationError

LOWPASS = 0.3
MAX_DENSITY = 0.999
MIN_TRANSMITTANCE = 1e-4


@dataclass
class Gaussians:
    means: torch.Tensor  # (N, 3)
    scales: torch.Tensor  # (N, 3)
    quats: torch.Tensor  # (N, 4) w, x, y, z
    opacities: torch.Tensor  # (N,)
    colors: torch.Tensor  # (N, 3)

    def __len__(self):
        return self.means.shape[0]

    def subset(self, keep) -> "Gaussians":
        return Gaussians(self.means[keep], self.scales[keep], self.quats[keep], self.opacities[keep], self.colors[keep])

    @classmethod
    def empty(cls):
        z = torch.zeros((0, 3), dtype=DTYPE)
        return cls(z, z.clone(), torch.zeros((0, 4), dtype=DTYPE), torch.zeros(0, dtype=DTYPE), z.clone())


@dataclass
class Camera:
    R: torch.Tensor  # world-to-camera rotation (3, 3)
    t: torch.Tensor  # world-to-camera translation (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    z_near: float = 0.01

    def __post_init__(self):
        self.R = torch.as_tensor(self.R, dtype=DTYPE)
        self.t = torch.as_tensor(self.t, dtype=DTYPE)

    @property
    def center(self) -> torch.Tensor:
        return -self.R.T @ self.t

    def validate(self):
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"camera resolution must be positive, got {self.width}x{self.height}")
        if self.fx <= 0 or self.fy <= 0:
            raise ValidationError("focal lengths must be positive")
        if self.z_near <= 0:
            raise ValidationError("z_near must be positive")
        eye = torch.eye(3, dtype=DTYPE)
        if not torch.allclose(self.R @ self.R.T, eye, atol=1e-6) or torch.det(self.R) < 0:
            raise ValidationError("camera rotation is not a proper rotation")

    def scaled(self, factor: float) -> "Camera":
        """Same view at ``factor`` times the resolution; pixel centers sit at integer coordinates."""
        w = max(1, int(round(self.width * factor)))
        h = max(1, int(round(self.height * factor)))
        return Camera(
            self.R, self.t, self.fx * factor, self.fy * factor,
            (self.cx + 0.5) * factor - 0.5, (self.cy + 0.5) * factor - 0.5,
            w, h, self.z_near,
        )


def quat_to_rot(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for (..., 4) quaternions in w, x, y, z order (normalized here)."""
    q = torch.as_tensor(q, dtype=DTYPE)
    norm = torch.linalg.vector_norm(q, dim=-1, keepdim=True)
    if (norm == 0).any():
        raise ValidationError("zero quaternion has no rotation")
    w, x, y, z = (q / norm).unbind(-1)
    rows = [
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ]
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def build_covariance(s: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    M = quat_to_rot(q) * torch.as_tensor(s, dtype=DTYPE)[..., None, :]
    return M @ M.transpose(-1, -2)


@dataclass
class Splats:
    means2d: torch.Tensor  # (M, 2) pixels
    cov2d: torch.Tensor  # (M, 2, 2) pixels^2, low-pass floor included
    depth: torch.Tensor  # (M,)
    opacities: torch.Tensor
    colors: torch.Tensor
    index: torch.Tensor  # (M,) position in the source Gaussians


def project_gaussians(g: Gaussians, cam: Camera) -> Splats:
    """Project to screen space; Gaussians at or in front of z_near are dropped."""
    p = g.means @ cam.R.T + cam.t
    keep = p[:, 2] > cam.z_near
    index = torch.nonzero(keep).reshape(-1)
    p = p[keep]
    x, y, z = p.unbind(-1)
    means2d = torch.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], dim=-1)
    zero = torch.zeros_like(z)
    J = torch.stack([
        torch.stack([cam.fx / z, zero, -cam.fx * x / z ** 2], dim=-1),
        torch.stack([zero, cam.fy / z, -cam.fy * y / z ** 2], dim=-1),
    ], dim=-2)
    T = J @ cam.R
    cov3 = build_covariance(g.scales[keep], g.quats[keep])
    cov2 = T @ cov3 @ T.transpose(-1, -2) + LOWPASS * torch.eye(2, dtype=DTYPE)
    return Splats(means2d, cov2, z, g.opacities[keep], g.colors[keep], index)


def project_gaussian(g: Gaussians, cam: Camera):
    """Single-primitive projection; returns None when culled by the near plane."""
    s = project_gaussians(g, cam)
    return None if s.index.numel() == 0 else s


def composite_pixel(densities, colors, background, depths=None):
    """Front-to-back compositing of one pixel's splats.

    Stops before a splat once the transmittance in front of it drops below
    1e-4, the same truncation the image renderer applies.
    """
    if __debug__ and depths is not None:
        d = [float(v) for v in depths]
        if any(b < a for a, b in zip(d, d[1:])):
            raise ValidationError("splats must be sorted front to back")
    background = torch.as_tensor(background, dtype=DTYPE)
    color = torch.zeros_like(background)
    trans = torch.ones((), dtype=DTYPE)
    for sigma, c in zip(densities, colors):
        if trans < MIN_TRANSMITTANCE:
            break
        color = color + torch.as_tensor(c, dtype=DTYPE) * sigma * trans
        trans = trans * (1 - sigma)
    return color + background * trans


def render_image(
    g: Gaussians,
    cam: Camera,
    background=(0.0, 0.0, 0.0),
    cull_sigma: float = 3.0,
    diagnostics: dict | None = None,
) -> torch.Tensor:
    """Render an (H, W, 3) image.

    A splat touches a pixel when the pixel lies within ``cull_sigma`` standard
    deviations along the splat's major axis. Depth ties resolve by primitive
    index, so the output is fully deterministic.
    """
    H, W = cam.height, cam.width
    bg = torch.as_tensor(background, dtype=DTYPE)
    splats = project_gaussians(g, cam)
    a = splats.cov2d[:, 0, 0]
    b = splats.cov2d[:, 0, 1]
    c = splats.cov2d[:, 1, 1]
    det = a * c - b * b
    ok = torch.isfinite(det) & (det > 0)
    if diagnostics is not None:
        diagnostics["culled_near"] = len(g) - splats.index.numel()
        diagnostics["skipped_singular"] = int((~ok).sum())
    if not ok.all():
        keep = torch.nonzero(ok).reshape(-1)
        a, b, c, det = a[keep], b[keep], c[keep], det[keep]
        splats = Splats(splats.means2d[keep], splats.cov2d[keep], splats.depth[keep],
                        splats.opacities[keep], splats.colors[keep], splats.index[keep])
    M = splats.index.numel()
    if M == 0:
        return bg.expand(H, W, 3).clone()

    order = torch.sort(splats.depth.detach(), stable=True).indices
    mean = splats.means2d[order]
    a, b, c, det = a[order], b[order], c[order], det[order]
    opac = splats.opacities[order]
    cols = splats.colors[order]

    pix_id, sid = _pixel_pairs(mean.detach(), a.detach(), c.detach(), det.detach(), cull_sigma, W, H)
    if sid.numel() == 0:
        return bg.expand(H, W, 3).clone()
    # pairs come out grouped by pixel and, within a pixel, in depth order
    dx = pix_id.remainder(W).to(DTYPE) - mean[sid, 0]
    dy = torch.div(pix_id, W, rounding_mode="floor").to(DTYPE) - mean[sid, 1]
    power = -0.5 * (c[sid] * dx * dx - 2 * b[sid] * dx * dy + a[sid] * dy * dy) / det[sid]
    sigma = torch.clamp(opac[sid] * torch.exp(power), max=MAX_DENSITY)

    # exclusive transmittance per pair as a segmented sum of log(1 - sigma);
    # sigma <= 0.999 keeps every log finite
    P = H * W
    log_keep = torch.log1p(-sigma)
    csum = torch.cumsum(log_keep, 0)
    before = csum - log_keep
    first = torch.ones_like(pix_id, dtype=torch.bool)
    first[1:] = pix_id[1:] != pix_id[:-1]
    seg_base = torch.zeros(P, dtype=DTYPE).index_put((pix_id[first],), before[first])
    trans = torch.exp(before - seg_base[pix_id])
    live = trans.detach() >= MIN_TRANSMITTANCE
    weight = torch.where(live, sigma * trans, torch.zeros_like(sigma))
    color = torch.zeros((P, 3), dtype=DTYPE).index_add(0, pix_id, weight[:, None] * cols[sid])
    log_final = torch.zeros(P, dtype=DTYPE).index_add(0, pix_id, torch.where(live, log_keep, torch.zeros_like(log_keep)))
    color = color + torch.exp(log_final)[:, None] * bg
    return color.reshape(H, W, 3)


def _pixel_pairs(mean, a, c, det, cull_sigma, W, H):
    """(pixel, splat) pairs within reach, sorted by pixel then splat order."""
    mid = 0.5 * (a + c)
    lam_max = mid + torch.sqrt(torch.clamp(mid * mid - det, min=0.0))
    reach = cull_sigma * torch.sqrt(lam_max)
    x0 = torch.clamp(torch.ceil(mean[:, 0] - reach), min=0)
    x1 = torch.clamp(torch.floor(mean[:, 0] + reach), max=W - 1)
    y0 = torch.clamp(torch.ceil(mean[:, 1] - reach), min=0)
    y1 = torch.clamp(torch.floor(mean[:, 1] + reach), max=H - 1)
    bw = torch.clamp(x1 - x0 + 1, min=0).to(torch.int64)
    bh = torch.clamp(y1 - y0 + 1, min=0).to(torch.int64)
    area = bw * bh
    M = mean.shape[0]
    sid = torch.repeat_interleave(torch.arange(M), area)
    if sid.numel() == 0:
        return sid, sid
    local = torch.arange(sid.numel()) - torch.repeat_interleave(torch.cumsum(area, 0) - area, area)
    px = x0.to(torch.int64)[sid] + local.remainder(bw[sid])
    py = y0.to(torch.int64)[sid] + torch.div(local, bw[sid], rounding_mode="floor")
    dx = px.to(DTYPE) - mean[sid, 0]
    dy = py.to(DTYPE) - mean[sid, 1]
    inside = dx * dx + dy * dy <= reach[sid] ** 2
    pix_id = (py * W + px)[inside]
    sid = sid[inside]
    key = torch.sort(pix_id * M + sid).values
    return torch.div(key, M, rounding_mode="floor"), key.remainder(M)
