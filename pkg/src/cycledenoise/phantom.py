"""Synthetic deformable cardiac-like phantoms and the unpaired dose domains.

A phantom is a stack of ellipses with CT-like intensities. Phase-dependent
smooth random displacements stand in for cardiac motion: domain A images
are phase-1 geometry with low-dose noise, domain B images are phase-8
geometry with routine-dose noise, and the two lists are shuffled
independently so training never sees aligned pairs.

Images are stored in offset units (CT-like value + 1000) so every pixel
is nonnegative; air/background is 0, dense structures approach 2000.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .nets import DomainLabel
from .tensor import ContractError, Tensor

HU_OFFSET = 1000.0
PHASE_MIN, PHASE_MAX = 1, 10
_FULL_DEFORM_PHASE = 8  # displacement amplitude is reached at this phase


class PhantomSpecError(ValueError):
    """A phantom description is geometrically invalid."""


@dataclass
class Ellipse:
    cx: float
    cy: float
    rx: float
    ry: float
    angle: float  # radians
    intensity: float  # CT-like units in [-1000, 1000]


@dataclass
class PhantomSpec:
    canvas: int = 128
    ellipses: list = field(default_factory=list)
    deform_amplitude: float = 4.0  # px displacement between phase 1 and phase 8
    background: float = -1000.0


@dataclass
class DoseModel:
    routine_dose_fraction: float = 1.0
    low_dose_fraction: float = 0.2
    base_noise_std: float = 25.0  # flat-region std at full dose, offset units
    streak_amplitude: float = 0.3  # horizontal streak component, fraction of the std

    def __post_init__(self):
        for name in ("routine_dose_fraction", "low_dose_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ContractError(f"DoseModel.{name} must be in (0, 1], got {v}")

    def noise_std(self, dose_fraction: float) -> float:
        return self.base_noise_std / math.sqrt(dose_fraction)


def random_phantom_spec(seed: int, canvas: int = 128, deform_amplitude: float = 4.0) -> PhantomSpec:
    """A randomized chest-slice-like phantom: body, lungs, heart, chambers, spine."""
    rng = np.random.default_rng([int(seed), 11])
    c = canvas / 2.0
    u = canvas / 128.0  # geometry scales with canvas size
    jit = lambda s: rng.uniform(-s, s) * u

    ellipses = [
        # body outline, water-like soft tissue
        Ellipse(c + jit(2), c + jit(2), (46 + jit(3)) * u, (40 + jit(3)) * u,
                rng.uniform(-0.1, 0.1), rng.uniform(-30, 30)),
        # lungs
        Ellipse(c - 24 * u + jit(2), c - 6 * u + jit(2), (13 + jit(2)) * u,
                (20 + jit(2)) * u, rng.uniform(-0.25, 0.25), -850 + rng.uniform(-40, 40)),
        Ellipse(c + 24 * u + jit(2), c - 6 * u + jit(2), (13 + jit(2)) * u,
                (20 + jit(2)) * u, rng.uniform(-0.25, 0.25), -850 + rng.uniform(-40, 40)),
        # heart muscle
        Ellipse(c + jit(3), c + 6 * u + jit(3), (17 + jit(2)) * u, (14 + jit(2)) * u,
                rng.uniform(-0.3, 0.3), 60 + rng.uniform(-20, 20)),
        # contrast-filled chambers
        Ellipse(c - 6 * u + jit(2), c + 4 * u + jit(2), (5.5 + jit(1)) * u,
                (4.5 + jit(1)) * u, rng.uniform(-0.5, 0.5), 420 + rng.uniform(-60, 60)),
        Ellipse(c + 6 * u + jit(2), c + 9 * u + jit(2), (4.5 + jit(1)) * u,
                (4 + jit(0.8)) * u, rng.uniform(-0.5, 0.5), 350 + rng.uniform(-60, 60)),
        # descending aorta analog
        Ellipse(c - 1 * u + jit(2), c + 26 * u + jit(1), (3.5 + jit(0.5)) * u,
                (3.5 + jit(0.5)) * u, 0.0, 500 + rng.uniform(-50, 50)),
        # spine
        Ellipse(c + jit(1), c + 34 * u + jit(1), (6 + jit(1)) * u, (4.5 + jit(0.8)) * u,
                rng.uniform(-0.1, 0.1), 800 + rng.uniform(-80, 80)),
    ]
    spec = PhantomSpec(canvas=canvas, ellipses=ellipses, deform_amplitude=deform_amplitude)
    _validate_spec(spec)
    return spec


def _bbox_half_extents(e: Ellipse) -> tuple[float, float]:
    cos, sin = math.cos(e.angle), math.sin(e.angle)
    hx = math.sqrt((e.rx * cos) ** 2 + (e.ry * sin) ** 2)
    hy = math.sqrt((e.rx * sin) ** 2 + (e.ry * cos) ** 2)
    return hx, hy


def _validate_spec(spec: PhantomSpec) -> None:
    margin = abs(spec.deform_amplitude)
    for i, e in enumerate(spec.ellipses):
        hx, hy = _bbox_half_extents(e)
        if (e.cx - hx - margin < 0 or e.cx + hx + margin > spec.canvas
                or e.cy - hy - margin < 0 or e.cy + hy + margin > spec.canvas):
            raise PhantomSpecError(
                f"ellipse {i} escapes the {spec.canvas}px canvas "
                f"(center ({e.cx:.1f},{e.cy:.1f}), half extents ({hx:.1f},{hy:.1f}), "
                f"deformation margin {margin:.1f})"
            )
        if not -1000.0 <= e.intensity <= 1000.0:
            raise PhantomSpecError(f"ellipse {i} intensity {e.intensity} outside [-1000, 1000]")


def _phase_fraction(phase: int) -> float:
    if not PHASE_MIN <= phase <= PHASE_MAX:
        raise ContractError(f"phase must be in [{PHASE_MIN}, {PHASE_MAX}], got {phase}")
    return (phase - PHASE_MIN) / (_FULL_DEFORM_PHASE - PHASE_MIN)


def _displacement_field(seed: int):
    """Smooth pseudo-random displacement as a function of position, unit amplitude."""
    rng = np.random.default_rng([int(seed), 23])
    # three low-frequency sinusoid components per axis
    freqs = rng.uniform(0.3, 1.2, size=(2, 3, 2))  # cycles per canvas
    phases = rng.uniform(0, 2 * np.pi, size=(2, 3))
    amps = rng.uniform(0.4, 1.0, size=(2, 3))
    amps /= np.abs(amps).sum(axis=1, keepdims=True)  # |displacement| <= 1 per axis

    def at(x: float, y: float, canvas: int):
        out = []
        for axis in range(2):
            v = 0.0
            for k in range(3):
                arg = 2 * np.pi * (freqs[axis, k, 0] * x + freqs[axis, k, 1] * y) / canvas
                v += amps[axis, k] * math.sin(arg + phases[axis, k])
            out.append(v)
        return out[0], out[1]

    return at


def _deformed_ellipses(spec: PhantomSpec, phase: int, seed: int) -> list[Ellipse]:
    t = _phase_fraction(phase)
    if t == 0.0 or spec.deform_amplitude == 0.0:
        return list(spec.ellipses)
    field_at = _displacement_field(seed)
    moved = []
    for e in spec.ellipses:
        dx, dy = field_at(e.cx, e.cy, spec.canvas)
        moved.append(replace(e, cx=e.cx + t * spec.deform_amplitude * dx,
                             cy=e.cy + t * spec.deform_amplitude * dy))
    return moved


_SUPERSAMPLE = 3


def render_phantom(spec: PhantomSpec, phase: int, seed: int) -> Tensor:
    """Anti-aliased raster of the phantom at the given cardiac phase, offset units."""
    _validate_spec(spec)
    ellipses = _deformed_ellipses(spec, phase, seed)
    n = spec.canvas
    s = _SUPERSAMPLE
    # supersampled pixel-center coordinates
    coords = (np.arange(n * s) + 0.5) / s
    xs = coords[None, :]
    ys = coords[:, None]
    img = np.full((n * s, n * s), spec.background, dtype=np.float64)
    for e in ellipses:
        cos, sin = math.cos(e.angle), math.sin(e.angle)
        xr = (xs - e.cx) * cos + (ys - e.cy) * sin
        yr = -(xs - e.cx) * sin + (ys - e.cy) * cos
        inside = (xr / e.rx) ** 2 + (yr / e.ry) ** 2 <= 1.0
        img[inside] = e.intensity
    img = img.reshape(n, s, n, s).mean(axis=(1, 3))
    out = (img + HU_OFFSET).astype(np.float32)
    return Tensor(out)


def apply_dose_noise(clean: Tensor, dose_fraction: float, model: DoseModel, seed: int) -> Tensor:
    """Add dose-scaled Gaussian noise plus a horizontally correlated streak component."""
    if not 0 < dose_fraction <= 1:
        raise ContractError(f"dose_fraction must be in (0, 1], got {dose_fraction}")
    data = clean.data if isinstance(clean, Tensor) else np.asarray(clean)
    if model.base_noise_std == 0.0:
        return Tensor(np.array(data, copy=True))
    sigma = model.noise_std(dose_fraction)
    rng = np.random.default_rng([int(seed), 37])
    noisy = data + rng.normal(0.0, sigma, data.shape)
    if model.streak_amplitude > 0.0:
        rows = rng.normal(0.0, model.streak_amplitude * sigma, (data.shape[0], 1))
        noisy = noisy + rows
    return Tensor(noisy.astype(data.dtype, copy=False))


def normalize(img: Tensor, max_val: float) -> Tensor:
    """Map [0, max_val] onto [-1, 1]: x' = 2*(x/max_val - 0.5)."""
    if max_val <= 0:
        raise ContractError(f"normalize: max_val must be > 0, got {max_val}")
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    return Tensor((2.0 * (data / data.dtype.type(max_val) - 0.5)).astype(data.dtype))


def denormalize(img: Tensor, max_val: float) -> Tensor:
    if max_val <= 0:
        raise ContractError(f"denormalize: max_val must be > 0, got {max_val}")
    data = img.data if isinstance(img, Tensor) else np.asarray(img)
    return Tensor(((data / 2.0 + 0.5) * data.dtype.type(max_val)).astype(data.dtype))


@dataclass
class UnpairedDataset:
    """Training-facing view: normalized images only, no ground truth exposed."""

    a_images: list  # normalized [-1, 1] arrays, H x W
    b_images: list
    a_norms: list  # per-image normalization constants
    b_norms: list

    def __post_init__(self):
        if not self.a_images or not self.b_images:
            raise ContractError("UnpairedDataset: both domains need at least one image")

    @classmethod
    def from_arrays(cls, a_raw, b_raw) -> "UnpairedDataset":
        """Build from raw nonnegative-intensity images, normalizing per image max."""
        def prep(images):
            out, norms = [], []
            for img in images:
                arr = np.asarray(img, dtype=np.float32)
                if arr.ndim != 2:
                    raise ContractError(f"expected 2-d images, got shape {arr.shape}")
                m = float(arr.max())
                if m <= 0:
                    raise ContractError("image max must be > 0 for normalization")
                out.append(normalize(Tensor(arr), m).data)
                norms.append(m)
            return out, norms

        a, an = prep(a_raw)
        b, bn = prep(b_raw)
        return cls(a, b, an, bn)


@dataclass
class PhantomDataset:
    """Simulation output: the unpaired domains plus held-back clean ground truth.

    ``clean_a[i]``/``clean_b[i]`` are the noise-free counterparts of
    ``a_images[i]``/``b_images[i]`` in offset units; they exist for
    evaluation only and are stripped by :meth:`training_view`.
    """

    a_images: list
    b_images: list
    a_norms: list
    b_norms: list
    clean_a: list
    clean_b: list
    meta: dict

    def training_view(self) -> UnpairedDataset:
        return UnpairedDataset(self.a_images, self.b_images, self.a_norms, self.b_norms)


def make_unpaired_dataset(
    n_phantoms: int,
    dose_model: DoseModel | None = None,
    seed: int = 0,
    canvas: int = 128,
    deform_amplitude: float = 4.0,
) -> PhantomDataset:
    """Render ``n_phantoms`` phantoms into unpaired low-dose / routine-dose domains."""
    if n_phantoms < 2:
        raise ContractError(f"need at least 2 phantoms, got {n_phantoms}")
    model = dose_model or DoseModel()
    a_raw, b_raw, a_clean, b_clean = [], [], [], []
    rows = []
    for i in range(n_phantoms):
        spec = random_phantom_spec(_sub_seed(seed, i, 0), canvas=canvas,
                                   deform_amplitude=deform_amplitude)
        field_seed = _sub_seed(seed, i, 1)
        clean1 = render_phantom(spec, 1, field_seed)
        clean8 = render_phantom(spec, _FULL_DEFORM_PHASE, field_seed)
        noisy_a = apply_dose_noise(clean1, model.low_dose_fraction, model,
                                   _sub_seed(seed, i, 2))
        noisy_b = apply_dose_noise(clean8, model.routine_dose_fraction, model,
                                   _sub_seed(seed, i, 3))
        a_raw.append(noisy_a.data)
        b_raw.append(noisy_b.data)
        a_clean.append(clean1.data)
        b_clean.append(clean8.data)
        rows.append({"phantom": i, "field_seed": field_seed})

    rng = np.random.default_rng([int(seed), 53])
    perm_a = rng.permutation(n_phantoms)
    perm_b = rng.permutation(n_phantoms)
    # break any accidental index alignment between the two domains
    for i in range(n_phantoms):
        if perm_a[i] == perm_b[i]:
            j = (i + 1) % n_phantoms
            perm_b[i], perm_b[j] = perm_b[j], perm_b[i]

    def take(lst, perm):
        return [lst[p] for p in perm]

    a_images, a_norms = _normalize_list(take(a_raw, perm_a))
    b_images, b_norms = _normalize_list(take(b_raw, perm_b))
    meta = {
        "seed": seed,
        "canvas": canvas,
        "deform_amplitude": deform_amplitude,
        "dose_model": model,
        "a_order": [int(p) for p in perm_a],
        "b_order": [int(p) for p in perm_b],
        "a_dose": model.low_dose_fraction,
        "b_dose": model.routine_dose_fraction,
        "a_phase": 1,
        "b_phase": _FULL_DEFORM_PHASE,
        "rows": rows,
    }
    return PhantomDataset(
        a_images, b_images, a_norms, b_norms,
        take(a_clean, perm_a), take(b_clean, perm_b), meta,
    )


def _sub_seed(seed: int, index: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(seed), int(index), int(stream)]).generate_state(1)[0])


def _normalize_list(raw):
    images, norms = [], []
    for arr in raw:
        m = float(arr.max())
        images.append(normalize(Tensor(arr), m).data)
        norms.append(m)
    return images, norms


def sample_patch_batch(
    dataset: UnpairedDataset,
    domain: DomainLabel,
    patch: int = 56,
    batch: int = 10,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Uniformly random (image, top-left corner) draws; domains sample independently."""
    if rng is None:
        rng = np.random.default_rng()
    images = dataset.a_images if domain == DomainLabel.A_LOW_DOSE else dataset.b_images
    out = np.empty((batch, 1, patch, patch), dtype=images[0].dtype)
    n = len(images)
    for k in range(batch):
        img = images[int(rng.integers(n))]
        h, w = img.shape
        if h < patch or w < patch:
            raise ContractError(f"patch {patch} larger than image {h}x{w}")
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        out[k, 0] = img[y : y + patch, x : x + patch]
    return Tensor(out)


def find_flat_roi(clean: np.ndarray, w: int = 12, h: int = 12,
                  stride: int = 4) -> tuple[int, int] | None:
    """Top-left of a w x h window that is exactly constant in the clean image,
    preferring windows close to the image center. None when nothing qualifies."""
    arr = np.asarray(clean)
    hh, ww = arr.shape
    cy, cx = hh / 2, ww / 2
    best = None
    best_d = None
    for y in range(0, hh - h + 1, stride):
        for x in range(0, ww - w + 1, stride):
            win = arr[y : y + h, x : x + w]
            if win.max() - win.min() == 0 and float(win[0, 0]) > 0:
                d = (y + h / 2 - cy) ** 2 + (x + w / 2 - cx) ** 2
                if best_d is None or d < best_d:
                    best, best_d = (x, y), d
    return best
