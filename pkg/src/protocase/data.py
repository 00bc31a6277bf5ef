"""Synthetic three-margin-type lesion dataset with relevance masks.

Each image is a bright blob on a smoothed-noise background. The blob boundary
carries the margin type: circumscribed (sharp edge), indistinct (wide Gaussian
ramp) or spiculated (sharp edge plus radial spikes). Masks follow the
convention 0 = relevant pixel, 1 = irrelevant pixel.

On disk::

    manifest.txt
    images/<id>.png
    lesion_masks/<id>.png
    fine_masks/<id>.png      (finely annotated samples only)

Mask PNGs store relevant pixels as 0 and irrelevant pixels as 255.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ChecksumError, ConfigError, ManifestError, MissingFileError

MARGIN_TYPES = ("circumscribed", "indistinct", "spiculated")
_ABBREV = {"circumscribed": "cir", "indistinct": "ind", "spiculated": "spi"}
SPLITS = ("train", "validation", "test")
FORMAT_VERSION = 1

# planted P(malignant | margin type)
MALIGNANCY_PROBS = {"circumscribed": 0.05, "indistinct": 0.4, "spiculated": 0.9}
# corner carrying the confounder tag for each type; index 3 is a neutral corner
_TAG_CORNERS = {"circumscribed": 0, "indistinct": 1, "spiculated": 2}

BACKGROUND_LEVEL = 0.25
LESION_LEVEL = 0.72
TAG_LEVEL = 0.95
TAG_SIZE = 6
TAG_OFFSET = 2


@dataclass
class GenConfig:
    n_per_type: int = 300
    image_size: tuple[int, int] = (64, 64)
    context_margin_px: int = 8
    fine_fraction: float = 0.12
    seed: int = 7
    confounder_strength: float = 0.0
    split_fractions: tuple[float, float, float] = (0.73, 0.12, 0.15)


@dataclass(eq=False)
class Sample:
    id: str
    image: np.ndarray
    margin_label: str
    malignancy_label: int
    lesion_mask: np.ndarray
    fine_mask: np.ndarray | None = None

    @property
    def margin_index(self) -> int:
        return MARGIN_TYPES.index(self.margin_label)

    @property
    def relevance_mask(self) -> np.ndarray:
        """Fine mask where available, else the lesion-scale mask."""
        return self.fine_mask if self.fine_mask is not None else self.lesion_mask

    def __eq__(self, other) -> bool:
        if not isinstance(other, Sample):
            return NotImplemented
        if (self.id, self.margin_label, self.malignancy_label) != (other.id, other.margin_label, other.malignancy_label):
            return False
        if (self.fine_mask is None) != (other.fine_mask is None):
            return False
        same = np.array_equal(self.image, other.image) and np.array_equal(self.lesion_mask, other.lesion_mask)
        if self.fine_mask is not None:
            same = same and np.array_equal(self.fine_mask, other.fine_mask)
        return bool(same)


@dataclass
class ManifestEntry:
    id: str
    split: str
    margin_label: str
    malignancy_label: int
    image: str
    image_sha256: str = ""
    lesion_mask: str = ""
    lesion_sha256: str = ""
    fine_mask: str = ""
    fine_sha256: str = ""


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    generator_seed: int
    image_size: tuple[int, int]
    config: dict = field(default_factory=dict)

    def counts(self) -> dict[str, int]:
        return {s: sum(e.split == s for e in self.entries) for s in SPLITS}

    def ids(self, split: str | None = None) -> list[str]:
        return [e.id for e in self.entries if split is None or e.split == split]


@dataclass
class Dataset:
    manifest: DatasetManifest
    samples: dict[str, Sample]

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ConfigError(f"unknown split {name!r}; expected one of {SPLITS}")
        return [self.samples[i] for i in self.manifest.ids(name)]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.manifest == other.manifest and self.samples.keys() == other.samples.keys()
                and all(self.samples[k] == other.samples[k] for k in self.samples))


# geometry -----------------------------------------------------------------

@dataclass
class LesionGeometry:
    """Analytic description of one lesion; used to render and to recompute masks."""

    center: tuple[float, float]
    radius: float
    harmonics: tuple[float, float, float, float]  # a2, phase2, a3, phase3
    edge_sigma: float
    band_half_width: float
    spikes: list[tuple[float, float, float]] = field(default_factory=list)  # angle, length, half-width

    def boundary_radius(self, theta: np.ndarray) -> np.ndarray:
        a2, p2, a3, p3 = self.harmonics
        return self.radius * (1 + a2 * np.cos(2 * (theta - p2)) + a3 * np.cos(3 * (theta - p3)))

    def max_extent(self) -> float:
        a2, _, a3, _ = self.harmonics
        reach = self.radius * (1 + abs(a2) + abs(a3))
        return reach + max((s[1] for s in self.spikes), default=0.0)

    def polar(self, rows: np.ndarray, cols: np.ndarray):
        dy, dx = rows - self.center[0], cols - self.center[1]
        return np.hypot(dy, dx), np.arctan2(dy, dx)

    def spike_profile(self, rows: np.ndarray, cols: np.ndarray, extra: float = 0.0) -> np.ndarray:
        """Spike intensity in [0,1]; with ``extra`` > 0 the footprint is widened by that many pixels."""
        out = np.zeros(np.shape(rows))
        for angle, length, half in self.spikes:
            base = float(self.boundary_radius(np.array(angle))) - 1.0
            uy, ux = math.sin(angle), math.cos(angle)
            y0, x0 = self.center[0] + base * uy, self.center[1] + base * ux
            along = (rows - y0) * uy + (cols - x0) * ux
            t = np.clip(along / (length + 1.0), 0.0, 1.0)
            py, px = y0 + t * (length + 1.0) * uy, x0 + t * (length + 1.0) * ux
            dist = np.hypot(rows - py, cols - px)
            width = half * (1.0 - 0.6 * t) + extra
            if extra > 0:
                out = np.maximum(out, (dist <= width).astype(float))
            else:
                out = np.maximum(out, np.exp(-0.5 * (dist / np.maximum(width, 1e-6)) ** 2) * (along <= length + 1.0))
        return out

    def body(self, rows, cols) -> np.ndarray:
        r, th = self.polar(rows, cols)
        z = (self.boundary_radius(th) - r) / self.edge_sigma
        return 0.5 * (1.0 + _erf(z / math.sqrt(2.0)))

    def footprint(self, rows, cols) -> np.ndarray:
        r, th = self.polar(rows, cols)
        blob = r <= self.boundary_radius(th)
        if self.spikes:
            blob |= self.spike_profile(rows, cols, extra=1e-9) > 0
        return blob

    def band(self, rows, cols, extra: float = 0.0) -> np.ndarray:
        """Margin-relevant region: a band around the boundary plus spike pixels."""
        r, th = self.polar(rows, cols)
        out = np.abs(r - self.boundary_radius(th)) <= self.band_half_width + extra
        if self.spikes:
            out |= self.spike_profile(rows, cols, extra=0.5 + extra) > 0
        return out


def _erf(x: np.ndarray) -> np.ndarray:
    from scipy.special import erf
    return erf(x)


def _grid(shape):
    return np.mgrid[0:shape[0], 0:shape[1]].astype(float)


def _draw_geometry(rng: np.random.Generator, margin: str, shape: tuple[int, int]) -> LesionGeometry:
    h, w = shape
    scale = min(h, w) / 64.0
    center = ((h - 1) / 2 + rng.uniform(-3, 3) * scale, (w - 1) / 2 + rng.uniform(-3, 3) * scale)
    radius = rng.uniform(8.0, 11.0) * scale
    harmonics = (rng.uniform(-0.08, 0.08), rng.uniform(0, np.pi), rng.uniform(-0.05, 0.05), rng.uniform(0, np.pi))
    spikes = []
    if margin == "spiculated":
        n = int(rng.integers(6, 10))
        angles = np.sort(rng.uniform(0, 2 * np.pi, n))
        spikes = [(float(a), float(rng.uniform(4.0, 8.0) * scale), float(rng.uniform(0.9, 1.3)))
                  for a in angles]
    sigma = 2.5 * scale if margin == "indistinct" else 0.6
    band = 3.0 if margin == "indistinct" else 2.0
    return LesionGeometry(center=center, radius=radius, harmonics=harmonics, edge_sigma=sigma,
                          band_half_width=band, spikes=spikes)


def _texture(rng: np.random.Generator, shape) -> np.ndarray:
    noise = ndimage.gaussian_filter(rng.normal(0.0, 1.0, shape), sigma=2.0, mode="wrap")
    noise /= noise.std() + 1e-12
    return BACKGROUND_LEVEL + 0.04 * noise + 0.01 * rng.normal(0.0, 1.0, shape)


def _tag_slice(corner: int, shape) -> tuple[slice, slice]:
    h, w = shape
    r0 = TAG_OFFSET if corner in (0, 1) else h - TAG_OFFSET - TAG_SIZE
    c0 = TAG_OFFSET if corner in (0, 2) else w - TAG_OFFSET - TAG_SIZE
    return slice(r0, r0 + TAG_SIZE), slice(c0, c0 + TAG_SIZE)


def render_sample(rng: np.random.Generator, sample_id: str, margin: str, config: GenConfig,
                  with_fine: bool) -> tuple[Sample, LesionGeometry]:
    """Draw one lesion and render its image and masks."""
    shape = tuple(config.image_size)
    geom = _draw_geometry(rng, margin, shape)
    half = min(shape) / 2.0
    reach = geom.max_extent() + config.context_margin_px + 3.0
    if reach > half:
        raise ConfigError(f"image size {shape} too small for lesion extent {geom.max_extent():.1f}px "
                          f"plus context margin {config.context_margin_px}px")
    rows, cols = _grid(shape)
    lesion = geom.body(rows, cols)
    if geom.spikes:
        lesion = np.maximum(lesion, geom.spike_profile(rows, cols))
    image = _texture(rng, shape)
    image = image + (LESION_LEVEL - BACKGROUND_LEVEL) * lesion * (1.0 + 0.03 * rng.normal(0.0, 1.0, shape))

    if config.confounder_strength > 0:
        corner = _TAG_CORNERS[margin] if rng.random() < config.confounder_strength else int(rng.integers(0, 4))
        image[_tag_slice(corner, shape)] = TAG_LEVEL

    image = np.round(np.clip(image, 0.0, 1.0) * 255.0) / 255.0

    footprint = geom.footprint(rows, cols)
    dist = ndimage.distance_transform_edt(~footprint)
    lesion_mask = np.where(dist <= config.context_margin_px, 0.0, 1.0)
    fine_mask = None
    if with_fine:
        fine_mask = np.where(geom.band(rows, cols) & (lesion_mask == 0), 0.0, 1.0)
    malignant = int(rng.random() < MALIGNANCY_PROBS[margin])
    return Sample(sample_id, image, margin, malignant, lesion_mask, fine_mask), geom


def _split_counts(n: int, fractions) -> tuple[int, int, int]:
    n_val = int(round(n * fractions[1]))
    n_test = int(round(n * fractions[2]))
    if n_val + n_test >= n:
        n_val, n_test = 0, 0 if n < 3 else 1
    return n - n_val - n_test, n_val, n_test


def generate(config: GenConfig, keep_geometry: bool = False):
    """Generate a dataset in memory. Deterministic given ``config.seed``.

    Returns a :class:`Dataset`, or ``(Dataset, {id: LesionGeometry})`` when
    ``keep_geometry`` is set.
    """
    if config.n_per_type < 1:
        raise ConfigError("n_per_type must be >= 1")
    if not 0.0 <= config.fine_fraction <= 1.0:
        raise ConfigError("fine_fraction must lie in [0, 1]")
    if not 0.0 <= config.confounder_strength <= 1.0:
        raise ConfigError("confounder_strength must lie in [0, 1]")
    rng = np.random.default_rng(config.seed)
    n = config.n_per_type
    n_fine = math.ceil(config.fine_fraction * n)
    samples, geoms, entries = {}, {}, []
    for margin in MARGIN_TYPES:
        fine_idx = set(rng.permutation(n)[:n_fine].tolist())
        n_train, n_val, _ = _split_counts(n, config.split_fractions)
        order = rng.permutation(n)
        split_of = {}
        for rank, i in enumerate(order):
            split_of[int(i)] = "train" if rank < n_train else ("validation" if rank < n_train + n_val else "test")
        for i in range(n):
            sid = f"{_ABBREV[margin]}{i:04d}"
            sample, geom = render_sample(rng, sid, margin, config, with_fine=i in fine_idx)
            samples[sid] = sample
            geoms[sid] = geom
            entries.append(ManifestEntry(
                id=sid, split=split_of[i], margin_label=margin, malignancy_label=sample.malignancy_label,
                image=f"images/{sid}.png", lesion_mask=f"lesion_masks/{sid}.png",
                fine_mask=f"fine_masks/{sid}.png" if sample.fine_mask is not None else ""))
    cfg = asdict(config)
    cfg["image_size"] = list(config.image_size)
    cfg["split_fractions"] = list(config.split_fractions)
    manifest = DatasetManifest(entries, config.seed, tuple(config.image_size), cfg)
    ds = Dataset(manifest, samples)
    return (ds, geoms) if keep_geometry else ds


# augmentation ----------------------------------------------------------------

@dataclass
class AugmentParams:
    flip_h: bool = False
    flip_v: bool = False
    angle_deg: float = 0.0
    crop: tuple[int, int, int, int] | None = None  # top, left, height, width

    def source_coords(self, shape) -> tuple[np.ndarray, np.ndarray]:
        """Map every output pixel to its (row, col) in the original image."""
        h, w = shape
        rows, cols = _grid(shape)
        if self.crop is not None:
            top, left, ch, cw = self.crop
            rows = top + rows * ((ch - 1) / (h - 1))
            cols = left + cols * ((cw - 1) / (w - 1))
        if self.angle_deg:
            a = math.radians(self.angle_deg)
            cy, cx = (h - 1) / 2, (w - 1) / 2
            dy, dx = rows - cy, cols - cx
            rows = cy + math.cos(a) * dy - math.sin(a) * dx
            cols = cx + math.sin(a) * dy + math.cos(a) * dx
        if self.flip_v:
            rows = (h - 1) - rows
        if self.flip_h:
            cols = (w - 1) - cols
        return rows, cols


def draw_augment_params(rng: np.random.Generator, shape, crop_fraction: float = 0.8,
                        max_angle: float = 180.0) -> AugmentParams:
    h, w = shape
    ch, cw = int(round(crop_fraction * h)), int(round(crop_fraction * w))
    return AugmentParams(
        flip_h=bool(rng.random() < 0.5),
        flip_v=bool(rng.random() < 0.5),
        angle_deg=float(rng.uniform(-max_angle, max_angle)),
        crop=(int(rng.integers(0, h - ch + 1)), int(rng.integers(0, w - cw + 1)), ch, cw),
    )


def apply_augment(sample: Sample, params: AugmentParams) -> Sample:
    """Apply one geometric transform to the image and both masks; labels unchanged."""
    rows, cols = params.source_coords(sample.image.shape)
    coords = np.stack([rows, cols])

    def _resample(arr, fill):
        return ndimage.map_coordinates(arr, coords, order=1, mode="constant", cval=fill)

    def _mask(arr):
        return np.where(_resample(arr, 1.0) >= 0.5, 1.0, 0.0)

    return replace(sample, image=_resample(sample.image, 0.0), lesion_mask=_mask(sample.lesion_mask),
                   fine_mask=None if sample.fine_mask is None else _mask(sample.fine_mask))


def augment(sample: Sample, rng: np.random.Generator, crop_fraction: float = 0.8) -> Sample:
    """Random flip, rotation and 80% crop rescaled to the original size."""
    return apply_augment(sample, draw_augment_params(rng, sample.image.shape, crop_fraction))


# persistence ---------------------------------------------------------------

def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_png(path: Path, arr: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="L").save(path, format="PNG")


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


_ROW_FIELDS = ("id", "split", "margin_label", "malignancy_label", "image", "image_sha256",
               "lesion_mask", "lesion_sha256", "fine_mask", "fine_sha256")


def save(dataset: Dataset, directory) -> Path:
    """Write images, masks and ``manifest.txt``; returns the manifest path."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for e in dataset.manifest.entries:
        s = dataset.samples[e.id]
        e = replace(e, image=f"images/{e.id}.png", lesion_mask=f"lesion_masks/{e.id}.png",
                    fine_mask=f"fine_masks/{e.id}.png" if s.fine_mask is not None else "")
        _write_png(root / e.image, s.image)
        _write_png(root / e.lesion_mask, s.lesion_mask)
        e.image_sha256 = _sha256(root / e.image)
        e.lesion_sha256 = _sha256(root / e.lesion_mask)
        if s.fine_mask is not None:
            _write_png(root / e.fine_mask, s.fine_mask)
            e.fine_sha256 = _sha256(root / e.fine_mask)
        else:
            e.fine_sha256 = ""
        entries.append(e)
    dataset.manifest.entries = entries

    m = dataset.manifest
    counts = m.counts()
    lines = ["# protocase synthetic dataset manifest",
             f"format_version = {FORMAT_VERSION}",
             f"generator_seed = {m.generator_seed}",
             f"image_size = {m.image_size[0]}x{m.image_size[1]}",
             f"n_samples = {len(m.entries)}"]
    lines += [f"n_{s} = {counts[s]}" for s in SPLITS]
    lines += [f"config.{k} = {_fmt(v)}" for k, v in sorted(m.config.items())]
    lines += ["", "[samples]", ",".join(_ROW_FIELDS)]
    lines += [",".join(str(getattr(e, f)) for f in _ROW_FIELDS) for e in entries]
    path = root / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def _fmt(v) -> str:
    if isinstance(v, (list, tuple)):
        return " ".join(str(x) for x in v)
    return str(v)


def _parse_config_value(v: str):
    parts = v.split()
    vals = []
    for p in parts:
        try:
            vals.append(int(p))
        except ValueError:
            try:
                vals.append(float(p))
            except ValueError:
                vals.append(p)
    if len(vals) == 1:
        return vals[0]
    return vals


def read_manifest(directory) -> DatasetManifest:
    root = Path(directory)
    path = root / "manifest.txt"
    if not path.is_file():
        raise MissingFileError(path, f"dataset manifest not found: {path}")
    header: dict[str, str] = {}
    rows: list[str] = []
    in_rows = False
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line == "[samples]":
            in_rows = True
            continue
        if in_rows:
            rows.append(line)
        else:
            if "=" not in line:
                raise ManifestError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            k, v = line.split("=", 1)
            header[k.strip()] = v.strip()
    try:
        if int(header["format_version"]) != FORMAT_VERSION:
            raise ManifestError(f"{path}: unsupported format_version {header['format_version']}")
        h, w = (int(x) for x in header["image_size"].split("x"))
        seed = int(header["generator_seed"])
        if not rows or rows[0].split(",") != list(_ROW_FIELDS):
            raise ManifestError(f"{path}: missing or malformed [samples] header row")
        entries = []
        for r in rows[1:]:
            vals = r.split(",")
            if len(vals) != len(_ROW_FIELDS):
                raise ManifestError(f"{path}: malformed sample row {r!r}")
            d = dict(zip(_ROW_FIELDS, vals))
            d["malignancy_label"] = int(d["malignancy_label"])
            if d["split"] not in SPLITS or d["margin_label"] not in MARGIN_TYPES:
                raise ManifestError(f"{path}: bad split or margin label in row {r!r}")
            entries.append(ManifestEntry(**d))
        expected_n = int(header["n_samples"])
        counts_hdr = {s: int(header[f"n_{s}"]) for s in SPLITS}
    except (KeyError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from exc
    config = {k[len("config."):]: _parse_config_value(v) for k, v in header.items() if k.startswith("config.")}
    for key in ("image_size", "split_fractions"):
        if key in config and not isinstance(config[key], list):
            config[key] = [config[key]]
    manifest = DatasetManifest(entries, seed, (h, w), config)
    if len(entries) != expected_n or manifest.counts() != counts_hdr:
        raise ManifestError(f"{path}: per-split counts do not match the header")
    if len({e.id for e in entries}) != len(entries):
        raise ManifestError(f"{path}: duplicate sample ids")
    return manifest


def load(directory, verify: bool = True) -> Dataset:
    """Load a dataset written by :func:`save`, checking files and content hashes."""
    root = Path(directory)
    manifest = read_manifest(root)
    samples = {}
    for e in manifest.entries:
        arrays = {}
        for rel, digest, key in ((e.image, e.image_sha256, "image"), (e.lesion_mask, e.lesion_sha256, "lesion"),
                                 (e.fine_mask, e.fine_sha256, "fine")):
            if not rel:
                continue
            p = root / rel
            if not p.is_file():
                raise MissingFileError(p)
            if verify:
                actual = _sha256(p)
                if actual != digest:
                    raise ChecksumError(p, digest, actual)
            arrays[key] = _read_png(p)
        if arrays["image"].shape != tuple(manifest.image_size):
            raise ManifestError(f"{root / e.image}: size {arrays['image'].shape} != {manifest.image_size}")
        samples[e.id] = Sample(e.id, arrays["image"], e.margin_label, e.malignancy_label,
                               arrays["lesion"], arrays.get("fine"))
    return Dataset(manifest, samples)
