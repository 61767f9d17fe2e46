"""Synthetic scenes, cameras, ray sampling and volume rendering."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .engine import Tape, Var

BACKGROUND = np.ones(3)
TEXTURE_SCALE = 16.0
DEFAULT_NEAR, DEFAULT_FAR = 0.1, 4.0
ORACLE_SAMPLES = 512


# ---------------------------------------------------------------------------
# scene
# ---------------------------------------------------------------------------

@dataclass
class Primitive:
    kind: str                       # "sphere" | "box"
    center: np.ndarray
    size: float                     # radius (sphere) or half-extent (box)
    albedo: np.ndarray
    density: float = 200.0
    texture_freq: float = 0.0       # 0 disables the procedural texture
    texture_phase: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def inside(self, p: np.ndarray) -> np.ndarray:
        d = p - self.center
        if self.kind == "sphere":
            return np.einsum("...i,...i->...", d, d) <= self.size ** 2
        return np.all(np.abs(d) <= self.size, axis=-1)

    def interval(self, o: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Entry and exit ray parameters (R,); empty intervals have t0 > t1."""
        oc = o - self.center
        if self.kind == "sphere":
            b = np.einsum("ri,ri->r", oc, d)
            disc = b * b - (np.einsum("ri,ri->r", oc, oc) - self.size ** 2)
            root = np.sqrt(np.maximum(disc, 0.0))
            t0, t1 = -b - root, -b + root
            return np.where(disc >= 0, t0, np.inf), np.where(disc >= 0, t1, -np.inf)
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / d
            a = (-self.size - oc) * inv
            b = (self.size - oc) * inv
        lo = np.nan_to_num(np.minimum(a, b), nan=-np.inf)
        hi = np.nan_to_num(np.maximum(a, b), nan=np.inf)
        return lo.max(axis=1), hi.min(axis=1)

    def color(self, p: np.ndarray) -> np.ndarray:
        base = np.broadcast_to(self.albedo, p.shape)
        if self.texture_freq <= 0:
            return base
        f = self.texture_freq
        ph = self.texture_phase
        pattern = (np.sin(f * p[..., 0] + ph[0]) * np.sin(f * p[..., 1] + ph[1])
                   * np.sin(f * p[..., 2] + ph[2]))
        return np.clip(base * (0.6 + 0.4 * pattern[..., None]), 0.0, 1.0)


@dataclass
class SyntheticScene:
    """Analytic primitives inside [-1, 1]^3. Deterministic from (complexity, seed)."""

    primitives: list[Primitive]
    complexity: int = 0
    seed: int = 0

    @classmethod
    def generate(cls, complexity: int, seed: int = 0) -> "SyntheticScene":
        """More primitives and higher texture frequency as ``complexity`` grows."""
        if complexity < 0:
            raise ValueError("complexity must be non-negative")
        rng = np.random.default_rng([seed, complexity])
        prims = []
        n = 0 if complexity == 0 else 2 * complexity - 1
        for i in range(n):
            kind = "sphere" if i % 2 == 0 else "box"
            size = float(rng.uniform(0.25, 0.55) / (1 + 0.15 * i))
            center = rng.uniform(-0.9 + size, 0.9 - size, 3)
            if i == 0:
                center[:2] = rng.uniform(-0.15, 0.15, 2)
            albedo = rng.uniform(0.1, 0.9, 3)
            freq = 0.0 if complexity <= 1 else float(TEXTURE_SCALE * (complexity - 1) * rng.uniform(0.8, 1.2))
            prims.append(Primitive(kind, center, size, albedo, texture_freq=freq,
                                   texture_phase=rng.uniform(0, 2 * math.pi, 3)))
        return cls(prims, complexity, seed)

    def density(self, p: np.ndarray) -> np.ndarray:
        out = np.zeros(p.shape[:-1])
        for prim in self.primitives:
            out = np.where(prim.inside(p), np.maximum(out, prim.density), out)
        return out

    def radiance_along(self, o: np.ndarray, d: np.ndarray, t: np.ndarray):
        """``radiance`` at points o + t d, with analytic ray/primitive intervals."""
        sigma = np.zeros(t.shape)
        color = np.zeros(t.shape + (3,))
        for prim in self.primitives:
            t0, t1 = prim.interval(o, d)
            m = (t >= t0[:, None]) & (t <= t1[:, None])
            if not m.any():
                continue
            sigma = np.where(m, np.maximum(sigma, prim.density), sigma)
            rows, cols = np.nonzero(m)
            color[m] = prim.color(o[rows] + t[m][:, None] * d[rows])
        return sigma, color

    def radiance(self, p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Density and color; where primitives overlap the later one wins."""
        sigma = np.zeros(p.shape[:-1])
        color = np.zeros(p.shape)
        for prim in self.primitives:
            m = prim.inside(p)
            if not m.any():
                continue
            sigma = np.where(m, np.maximum(sigma, prim.density), sigma)
            color[m] = prim.color(p[m])
        return sigma, color


# ---------------------------------------------------------------------------
# camera and rays
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    position: np.ndarray
    rotation: np.ndarray          # camera-to-world; columns are right, up, backward
    fov: float                    # horizontal field of view, radians
    width: int
    height: int

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ValueError("camera rotation must be orthonormal")

    @property
    def focal(self) -> float:
        return 0.5 * self.width / math.tan(0.5 * self.fov)

    @classmethod
    def look_at(cls, position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0),
                fov: float = math.radians(45.0), width: int = 64, height: int = 64) -> "Camera":
        position = np.asarray(position, dtype=np.float64)
        back = position - np.asarray(target, dtype=np.float64)
        back /= np.linalg.norm(back)
        right = np.cross(np.asarray(up, dtype=np.float64), back)
        if np.linalg.norm(right) < 1e-8:
            right = np.cross(np.array([0.0, 0.0, 1.0]), back)
        right /= np.linalg.norm(right)
        true_up = np.cross(back, right)
        return cls(position, np.stack([right, true_up, back], axis=1), fov, width, height)

    @classmethod
    def orbit(cls, angle: float, elevation: float = 0.3, radius: float = 2.5, **kw) -> "Camera":
        pos = radius * np.array([math.sin(angle) * math.cos(elevation), math.sin(elevation),
                                 math.cos(angle) * math.cos(elevation)])
        return cls.look_at(pos, **kw)

    def all_pixels(self) -> np.ndarray:
        rows, cols = np.meshgrid(np.arange(self.height), np.arange(self.width), indexing="ij")
        return np.stack([rows.ravel(), cols.ravel()], axis=1)


@dataclass
class Rays:
    origins: np.ndarray
    dirs: np.ndarray
    near: np.ndarray
    far: np.ndarray

    def __len__(self) -> int:
        return len(self.origins)


def generate_rays(camera: Camera, pixels: np.ndarray | None = None,
                  near: float = DEFAULT_NEAR, far: float = DEFAULT_FAR) -> Rays:
    """Pinhole rays through pixel centers. ``pixels`` holds (row, col) pairs."""
    if pixels is None:
        pixels = camera.all_pixels()
    pixels = np.asarray(pixels)
    rows, cols = pixels[:, 0], pixels[:, 1]
    if (rows.min(initial=0) < 0 or cols.min(initial=0) < 0
            or rows.max(initial=0) >= camera.height or cols.max(initial=0) >= camera.width):
        raise ValueError("pixel outside image bounds")
    f = camera.focal
    d_cam = np.stack([(cols + 0.5 - 0.5 * camera.width) / f,
                      -(rows + 0.5 - 0.5 * camera.height) / f,
                      -np.ones(len(pixels))], axis=1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(camera.position, d.shape).copy()
    n = np.full(len(d), near)
    fa = np.full(len(d), far)
    return Rays(o, d, n, fa)


def clip_to_box(rays: Rays, lo: float = -1.0, hi: float = 1.0) -> tuple[Rays, np.ndarray]:
    """Restrict [near, far] to the scene box; returns (rays, hit mask)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / rays.dirs
        t0 = (lo - rays.origins) * inv
        t1 = (hi - rays.origins) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=1)
    near = np.maximum(rays.near, tmin)
    far = np.minimum(rays.far, tmax)
    hit = far > near + 1e-6
    near = np.where(hit, near, rays.near)
    far = np.where(hit, far, rays.far)
    return Rays(rays.origins, rays.dirs, near, far), hit


def stratified_samples(near, far, n: int, rng: np.random.Generator | None = None):
    """One draw per stratum of [near, far] for each ray.

    Returns ``(t, delta)`` of shape (R, n). ``delta_i = t_{i+1} - t_i`` with the
    last spacing running to ``far``; the gap before the first sample is folded
    into the first spacing so spacings sum to ``far - near``. Without ``rng``
    stratum midpoints are used.
    """
    if n < 2:
        raise ValueError("need at least two samples per ray")
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    u = np.full((len(near), n), 0.5) if rng is None else rng.random((len(near), n))
    width = (far - near)[:, None] / n
    t = near[:, None] + (np.arange(n)[None] + u) * width
    delta = np.empty_like(t)
    delta[:, :-1] = t[:, 1:] - t[:, :-1]
    delta[:, -1] = far - t[:, -1]
    delta[:, 0] += t[:, 0] - near
    return t, delta


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def _weights(sigma, delta):
    tau = sigma * delta
    alpha = 1.0 - np.exp(-tau)
    csum = np.cumsum(tau, axis=-1)
    trans = np.exp(-np.concatenate([np.zeros_like(csum[..., :1]), csum[..., :-1]], axis=-1))
    return alpha, trans, trans * alpha, np.exp(-csum)


def volume_render_np(sigma, color, delta):
    """Discrete quadrature. Returns (color (R,3), accumulated opacity (R,))."""
    sigma = np.asarray(sigma)
    _, _, w, _ = _weights(sigma, np.asarray(delta, dtype=sigma.dtype))
    return np.einsum("rn,rnc->rc", w, color), w.sum(axis=-1)


def volume_render(tape: Tape, sigma: Var, color: Var, delta: np.ndarray) -> tuple[Var, Var]:
    """Tape op over (R, N) densities and (R, N, 3) colors.

    Returns Vars for the composited color (without background) and the
    accumulated opacity.
    """
    s, c = sigma.value, color.value
    delta = np.asarray(delta, dtype=s.dtype)
    _, _, w, t_final_each = _weights(s, delta)   # exp(-cumsum) = transmittance past sample i
    rgb = np.einsum("rn,rnc->rc", w, c)
    acc = w.sum(axis=-1)
    # both outputs share one node so the backward sees both upstream grads
    packed = np.concatenate([rgb, acc[:, None]], axis=1)

    def backward(g):
        g_rgb, g_acc = g[:, :3], g[:, 3]
        per = np.einsum("rnc,rc->rn", c, g_rgb) + g_acc[:, None]     # dL/dw_i
        wp = w * per
        after = np.cumsum(wp[:, ::-1], axis=1)[:, ::-1] - wp           # sum_{i>k} w_i per_i
        g_sigma = delta * (t_final_each * per - after)
        g_color = w[..., None] * g_rgb[:, None, :]
        return [g_sigma.astype(s.dtype), g_color.astype(c.dtype)]

    out = tape.custom(packed, (sigma, color), backward)
    return tape.columns(out, 0, 3), tape.reshape(tape.columns(out, 3, 4), (-1,))


def composite(tape: Tape, rgb: Var, acc: Var, background=BACKGROUND) -> Var:
    """rgb + (1 - acc) * background."""
    bg = np.asarray(background, dtype=rgb.value.dtype)
    out = rgb.value + (1.0 - acc.value)[:, None] * bg
    return tape.custom(out, (rgb, acc), lambda g: [g, -(g @ bg)])


# ---------------------------------------------------------------------------
# oracle and model rendering
# ---------------------------------------------------------------------------

def oracle_render_rays(scene: SyntheticScene, rays: Rays, n_samples: int = ORACLE_SAMPLES,
                       chunk: int = 2048) -> np.ndarray:
    rays, hit = clip_to_box(rays)
    out = np.tile(BACKGROUND, (len(rays), 1)).astype(np.float64)
    idx = np.nonzero(hit)[0]
    for start in range(0, len(idx), chunk):
        sel = idx[start:start + chunk]
        t, delta = stratified_samples(rays.near[sel], rays.far[sel], n_samples)
        sigma, color = scene.radiance_along(rays.origins[sel], rays.dirs[sel], t)
        rgb, acc = volume_render_np(sigma, color, delta)
        out[sel] = rgb + (1.0 - acc)[:, None] * BACKGROUND
    return np.clip(out, 0.0, 1.0)


def oracle_render(scene: SyntheticScene, camera: Camera, n_samples: int = ORACLE_SAMPLES) -> np.ndarray:
    """Reference image (H, W, 3) by dense uniform quadrature."""
    rays = generate_rays(camera)
    return oracle_render_rays(scene, rays, n_samples).reshape(camera.height, camera.width, 3)


def target_image_2d(scene: SyntheticScene, size: int = 128) -> np.ndarray:
    """Ground-truth image for 2D mode: a frontal oracle render of the scene."""
    cam = Camera.look_at((0.0, 0.0, 2.6), fov=math.radians(50.0), width=size, height=size)
    return oracle_render(scene, cam)


def pixel_coords(height: int, width: int) -> np.ndarray:
    """Normalized (x, y) pixel centers in (0, 1), row-major over the image."""
    rows, cols = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([(cols.ravel() + 0.5) / width, (rows.ravel() + 0.5) / height], axis=1)


def world_to_unit(p: np.ndarray) -> np.ndarray:
    return (p + 1.0) * 0.5


def render_rays(model, registry, rays: Rays, mode: str, n_samples: int = 64,
                rng: np.random.Generator | None = None, tape: Tape | None = None,
                hook=None) -> Var:
    """Render rays through the field (3D). Returns composited colors (R, 3)."""
    from .field import encode_plan, field_forward

    if tape is None:
        tape = Tape(grad=False)
    rays, hit = clip_to_box(rays)
    t, delta = stratified_samples(rays.near, rays.far, n_samples, rng)
    delta = np.where(hit[:, None], delta, 0.0)
    pts = rays.origins[:, None] + t[..., None] * rays.dirs[:, None]
    pts = np.clip(world_to_unit(pts), 0.0, 1.0).reshape(-1, 3)
    dirs = np.repeat(rays.dirs, n_samples, axis=0)
    plan = encode_plan(pts, model.cfg, dtype=tape.dtype)
    sigma, rgb = field_forward(model, plan, dirs, registry, mode, tape, hook)
    R = len(rays)
    sigma = tape.reshape(sigma, (R, n_samples))
    rgb = tape.reshape(rgb, (R, n_samples, 3))
    color, acc = volume_render(tape, sigma, rgb, delta.astype(tape.dtype))
    return composite(tape, color, acc)


def render_image(model, registry, camera: Camera | None = None, mode: str = "full_precision",
                 n_samples: int = 64, chunk: int = 4096, size: int | None = None,
                 dtype=np.float32, hook=None) -> np.ndarray:
    """Full image from the field: volume rendering in 3D, direct lattice evaluation in 2D."""
    from .field import encode_plan, field_forward

    if model.cfg.dim == 2:
        if size is None:
            size = camera.width if camera is not None else 128
        coords = pixel_coords(size, size)
        out = np.empty((len(coords), 3))
        for start in range(0, len(coords), chunk):
            plan = encode_plan(coords[start:start + chunk], model.cfg, dtype=dtype)
            _, rgb = field_forward(model, plan, None, registry, mode, Tape(dtype, grad=False), hook)
            out[start:start + chunk] = rgb.value
        return out.reshape(size, size, 3)
    if camera is None:
        raise ValueError("3D rendering needs a camera")
    rays = generate_rays(camera)
    out = np.empty((len(rays), 3))
    step = max(1, chunk // n_samples)
    for start in range(0, len(rays), step):
        sl = slice(start, start + step)
        sub = Rays(rays.origins[sl], rays.dirs[sl], rays.near[sl], rays.far[sl])
        out[sl] = render_rays(model, registry, sub, mode, n_samples,
                              tape=Tape(dtype, grad=False), hook=hook).value
    return out.reshape(camera.height, camera.width, 3)


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def save_image(image: np.ndarray, path) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {arr.shape}")
    data = np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)
    Image.fromarray(data).save(path, format="PNG")


def load_image(path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            img.load()
            if img.format != "PNG":
                raise ValueError(f"{path}: not a PNG file ({img.format})")
            if img.mode != "RGB":
                raise ValueError(f"{path}: expected 8-bit RGB, got mode {img.mode}")
            data = np.asarray(img, dtype=np.uint8)
    except (OSError, SyntaxError) as exc:
        raise ValueError(f"{path}: malformed image ({exc})") from exc
    return data.astype(np.float64) / 255.0
