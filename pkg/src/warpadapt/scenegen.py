"""Procedural paired-domain scene generator with exact ground truth.

Scenes are textured rectangles and ellipses at per-layer constant depth over a
textured background. Each view (left, right, next frame) is re-composited from
the layer geometry rather than warped, so occlusions are genuine: disparity
shifts every layer horizontally by its own amount and flow translates it in
2-D. Textures are low-frequency sinusoids evaluated analytically at each
view's coordinates, keeping photoconsistency errors well under the bilinear
interpolation tolerance.

The "real" domain is a color/gamma/vignette/noise shift of independently
generated scenes; ground truth rides along for held-out evaluation only.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .autograd import Tensor
from .dataio import DATASET_MAGIC, Reader, pack_tensor
from .errors import ConfigError, FormatError
from .warping import WarpField

FIELD_ORDER = ("left", "right", "next_left", "disparity", "flow", "occlusion")
DOMAIN_TAGS = {"synthetic": 0, "real": 1}
DOMAIN_NAMES = {v: k for k, v in DOMAIN_TAGS.items()}


@dataclass
class SceneSample:
    left: np.ndarray                     # (1, 3, h, w) in [0, 1]
    right: np.ndarray
    next_left: np.ndarray
    disparity: Optional[np.ndarray]      # (1, 1, h, w) pixels, >= 0
    flow: Optional[np.ndarray]           # (1, 2, h, w) pixels (u, v)
    occlusion: Optional[np.ndarray]      # (1, 1, h, w), 1 = visible at t and t+1
    domain: str = "synthetic"

    def disparity_field(self) -> WarpField:
        return WarpField("disparity", Tensor(self.disparity))

    def flow_field(self) -> WarpField:
        return WarpField("flow", Tensor(self.flow))


@dataclass
class SceneDiagnostics:
    stereo_valid: np.ndarray             # (1, 1, h, w), 1 = surface visible in both views


@dataclass
class DomainShift:
    gamma_curve: float = 1.0
    color_matrix: np.ndarray = None
    noise_sigma: float = 0.0
    vignette_strength: float = 0.0

    def __post_init__(self):
        if self.color_matrix is None:
            self.color_matrix = np.eye(3, dtype=np.float64)
        self.color_matrix = np.asarray(self.color_matrix, dtype=np.float64)
        if self.color_matrix.shape != (3, 3):
            raise ConfigError(f"color matrix must be 3x3, got {self.color_matrix.shape}")


def shift_preset(name: str) -> DomainShift:
    if name == "none":
        return DomainShift()
    if name == "mild":
        return DomainShift(gamma_curve=0.85,
                           color_matrix=[[0.95, 0.05, 0.0],
                                         [0.0, 0.95, 0.05],
                                         [0.05, 0.0, 0.95]],
                           noise_sigma=0.002, vignette_strength=0.03)
    if name == "default":
        # the vignette is the main cross-view/cross-frame photometric gap:
        # displacement through a static spatial falloff that a
        # translation-equivariant generator cannot reproduce
        return DomainShift(gamma_curve=0.65,
                           color_matrix=[[0.80, 0.20, 0.05],
                                         [0.05, 0.75, 0.20],
                                         [0.20, 0.05, 0.80]],
                           noise_sigma=0.003, vignette_strength=0.12)
    raise ConfigError(f"unknown shift preset {name!r}")


# -- rendering -----------------------------------------------------------------

class _Layer:
    __slots__ = ("kind", "cx", "cy", "sx", "sy", "disp", "u", "v", "tex")

    def __init__(self, kind, cx, cy, sx, sy, disp, u, v, tex):
        self.kind, self.cx, self.cy = kind, cx, cy
        self.sx, self.sy = sx, sy
        self.disp, self.u, self.v = disp, u, v
        self.tex = tex

    def member(self, xs, ys):
        if self.kind == "background":
            return np.ones_like(xs, dtype=bool)
        dx = (xs - self.cx) / self.sx
        dy = (ys - self.cy) / self.sy
        if self.kind == "rect":
            return (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
        return dx * dx + dy * dy <= 1.0


def _make_texture(rng):
    # three bands down to ~7 px: the fine band carries most of the matching
    # signal; amplitudes keep the bilinear photoconsistency error within the
    # 1e-2 budget (sum of amp * (2*pi/lambda)^2 / 8 over bands)
    base = rng.uniform(0.3, 0.7, size=3)
    waves = []
    for amp, lam_lo, lam_hi in ((0.14, 16.0, 40.0), (0.07, 10.0, 16.0),
                                (0.04, 7.0, 10.0)):
        lam = rng.uniform(lam_lo, lam_hi)
        theta = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2 * np.pi, size=3)
        signs = rng.choice([-1.0, 1.0], size=3)
        waves.append((amp, 2 * np.pi / lam, np.cos(theta), np.sin(theta), phase, signs))
    return base, waves


def _eval_texture(tex, xs, ys):
    base, waves = tex
    out = np.empty((3,) + xs.shape)
    for c in range(3):
        acc = np.full(xs.shape, base[c])
        for amp, k, cth, sth, phase, signs in waves:
            acc = acc + signs[c] * amp * np.sin(k * (xs * cth + ys * sth) + phase[c])
        out[c] = acc
    return out


def _sample_layers(rng, width, height, max_disp, max_flow, num_layers):
    d_bg = rng.uniform(0.2, 1.0)
    ang = rng.uniform(0, 2 * np.pi)
    mag = rng.uniform(0.0, 1.0)
    background = _Layer("background", 0, 0, 1, 1, d_bg,
                        mag * np.cos(ang), mag * np.sin(ang), _make_texture(rng))
    layers = [background]
    count = int(rng.integers(5, 11)) if num_layers is None else num_layers
    for _ in range(count):
        kind = "rect" if rng.uniform() < 0.5 else "ellipse"
        cx = rng.uniform(0.1 * width, 0.9 * width)
        cy = rng.uniform(0.1 * height, 0.9 * height)
        sx = rng.uniform(0.08 * width, 0.22 * width)
        sy = rng.uniform(0.12 * height, 0.28 * height)
        disp = rng.uniform(d_bg + 0.5, 0.95 * max_disp)
        ang = rng.uniform(0, 2 * np.pi)
        mag = rng.uniform(0.5, 0.95 * max_flow)
        layers.append(_Layer(kind, cx, cy, sx, sy, disp,
                             mag * np.cos(ang), mag * np.sin(ang), _make_texture(rng)))
    # far to near; nearer layers composite on top
    layers.sort(key=lambda l: l.disp)
    return layers


def _composite(layers, xs, ys, offset_of):
    """Render one view: every layer is tested and textured at its own offset."""
    img = np.zeros((3,) + xs.shape)
    ids = np.full(xs.shape, -1, dtype=np.int32)
    for idx, layer in enumerate(layers):
        ox, oy = offset_of(layer)
        lx, ly = xs - ox, ys - oy
        m = layer.member(lx, ly)
        if not m.any():
            continue
        tex = _eval_texture(layer.tex, lx, ly)
        img[:, m] = tex[:, m]
        ids[m] = idx
    return img, ids


def _lookup_ids(ids, qx, qy):
    """Layer ids at the integer corners around fractional query points.

    Returns (all-corners-equal-and-inbounds mask, corner id) so callers can
    test whether a warped position still shows the same surface.
    """
    h, w = ids.shape
    x0 = np.floor(qx).astype(np.int64)
    y0 = np.floor(qy).astype(np.int64)
    ok = np.ones(qx.shape, dtype=bool)
    ref = None
    for dy in (0, 1):
        for dx in (0, 1):
            xi, yi = x0 + dx, y0 + dy
            inb = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            vals = ids[np.clip(yi, 0, h - 1), np.clip(xi, 0, w - 1)]
            ok &= inb
            if ref is None:
                ref = vals
            else:
                ok &= vals == ref
    return ok, ref


def render_scene(seed: int, width: int = 128, height: int = 64, max_disp: int = 16,
                 max_flow: int = 8, num_layers: int | None = None):
    """Generate one synthetic tuple plus its visibility diagnostics."""
    if width < 8 or height < 8 or width % 4 or height % 4:
        raise ConfigError(f"extents must be >= 8 and divisible by 4, got {width}x{height}")
    rng = np.random.default_rng(np.random.PCG64(seed))
    layers = _sample_layers(rng, width, height, max_disp, max_flow, num_layers)
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")

    left, id_left = _composite(layers, xs, ys, lambda l: (0.0, 0.0))
    right, id_right = _composite(layers, xs, ys, lambda l: (-l.disp, 0.0))
    nxt, id_next = _composite(layers, xs, ys, lambda l: (l.u, l.v))

    disp_of = np.array([l.disp for l in layers])
    u_of = np.array([l.u for l in layers])
    v_of = np.array([l.v for l in layers])
    disparity = disp_of[id_left]
    flow_u = u_of[id_left]
    flow_v = v_of[id_left]

    occl_ok, occl_ref = _lookup_ids(id_next, xs + flow_u, ys + flow_v)
    occlusion = occl_ok & (occl_ref == id_left)
    stereo_ok, stereo_ref = _lookup_ids(id_right, xs - disparity, ys)
    stereo_valid = stereo_ok & (stereo_ref == id_left)

    def shape4(a, c):
        return np.ascontiguousarray(a, dtype=np.float32).reshape(1, c, height, width)

    sample = SceneSample(
        left=shape4(left, 3), right=shape4(right, 3), next_left=shape4(nxt, 3),
        disparity=shape4(disparity, 1),
        flow=shape4(np.stack([flow_u, flow_v]), 2),
        occlusion=shape4(occlusion.astype(np.float64), 1),
        domain="synthetic")
    return sample, SceneDiagnostics(stereo_valid=shape4(stereo_valid.astype(np.float64), 1))


def generate_scene(seed: int, width: int = 128, height: int = 64, max_disp: int = 16,
                   max_flow: int = 8, num_layers: int | None = None) -> SceneSample:
    return render_scene(seed, width, height, max_disp, max_flow, num_layers)[0]


def apply_domain_shift(sample: SceneSample, shift: DomainShift, seed: int) -> SceneSample:
    """Shifted copy of a synthetic sample tagged as the real domain.

    The same shift parameters hit all three frames (fresh noise per frame);
    ground-truth fields are kept for held-out evaluation.
    """
    if sample.domain != "synthetic":
        raise ConfigError("domain shift applies to synthetic samples")

    h, w = sample.left.shape[2], sample.left.shape[3]
    ys, xs = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    r2 = ((xs - (w - 1) / 2) / (w / 2)) ** 2 + ((ys - (h - 1) / 2) / (h / 2)) ** 2
    vignette = -shift.vignette_strength * r2

    def transform(img, frame_idx):
        rng = np.random.default_rng([seed, frame_idx])
        v = img.astype(np.float64) ** shift.gamma_curve
        mixed = np.einsum("dc,bchw->bdhw", shift.color_matrix, v)
        noisy = mixed + vignette + rng.normal(0.0, shift.noise_sigma, size=img.shape)
        return np.clip(noisy, 0.0, 1.0).astype(np.float32)

    return replace(sample,
                   left=transform(sample.left, 0),
                   right=transform(sample.right, 1),
                   next_left=transform(sample.next_left, 2),
                   domain="real")


# -- on-disk format --------------------------------------------------------------

def sample_to_bytes(sample: SceneSample) -> bytes:
    fields = [getattr(sample, name) for name in FIELD_ORDER]
    bitmap = 0
    for i, val in enumerate(fields):
        if val is not None:
            bitmap |= 1 << i
    out = [DATASET_MAGIC, struct.pack("<BB", DOMAIN_TAGS[sample.domain], bitmap)]
    for val in fields:
        if val is not None:
            out.append(pack_tensor(val))
    return b"".join(out)


def sample_from_bytes(buf: bytes, label: str = "sample") -> SceneSample:
    r = Reader(buf, label)
    r.expect_magic(DATASET_MAGIC)
    tag = r.u8()
    if tag not in DOMAIN_NAMES:
        raise FormatError(f"{label}: unknown domain tag {tag} at byte {r.off - 1}")
    bitmap = r.u8()
    values = {}
    for i, name in enumerate(FIELD_ORDER):
        values[name] = r.tensor() if bitmap & (1 << i) else None
    r.done()
    return SceneSample(domain=DOMAIN_NAMES[tag], **values)


def write_dataset(samples, out_dir: str) -> list[str]:
    os.makedirs(out_dir, exist_ok=True)
    names = []
    for i, sample in enumerate(samples):
        name = f"sample_{i:05d}.wad"
        with open(os.path.join(out_dir, name), "wb") as fh:
            fh.write(sample_to_bytes(sample))
        names.append(name)
    with open(os.path.join(out_dir, "manifest.txt"), "w") as fh:
        fh.write("".join(n + "\n" for n in names))
    return names


def read_dataset(data_dir: str) -> list[SceneSample]:
    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FormatError(f"no manifest.txt in {data_dir}")
    with open(manifest) as fh:
        names = [line.strip() for line in fh if line.strip()]
    samples = []
    for name in names:
        with open(os.path.join(data_dir, name), "rb") as fh:
            samples.append(sample_from_bytes(fh.read(), label=name))
    return samples


def split_domains(samples):
    synthetic = [s for s in samples if s.domain == "synthetic"]
    real = [s for s in samples if s.domain == "real"]
    return synthetic, real
