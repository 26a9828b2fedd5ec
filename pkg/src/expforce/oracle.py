"""Coulomb-model grasp oracle and synthetic pool generator.

The physical model is deliberately minimal: a grasped object of mass m slips
whenever mu_eff * F < m * g, where F is the total normal force across the
finger contacts and mu_eff is an effective grip ratio folding in contact
geometry and finger compliance (for a soft gripper it routinely exceeds 1).
The minimum feasible force is therefore max(f_init, m*g/mu_eff), rounded up
to the command grid.

Two routes compute it: a closed form, and an adaptive search that mimics the
measurement protocol (start light, tighten one step per slip event). Tests
hold the two routes equal; neither is allowed to call the other.

Synthetic pools draw (mass, grip ratio) pairs and stamp quantized "mass band
i of 64" and "grip band j of 32" tokens into each description. Those tokens
are the hooks the offline mock embedding provider keys on, so retrieval over
a synthetic pool ranks by physical similarity without any remote model.
"""

from __future__ import annotations

import math
import re
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ForceCapExceeded, InvalidArgument
from .pool import IMAGES_DIR, Category, ExperienceRecord, Pool, save_pool

MASS_BAND_COUNT = 64
GRIP_BAND_COUNT = 32
MASS_RANGE_KG = (0.01, 1.5)
MU_RANGE = (0.8, 4.0)

_BAND_RE = re.compile(r"mass band (\d+) of (\d+)", re.IGNORECASE)
_GRIP_RE = re.compile(r"grip band (\d+) of (\d+)", re.IGNORECASE)


@dataclass(frozen=True)
class OracleConfig:
    """Force schedule and physics constants.

    noise_sigma_n adds zero-mean Gaussian measurement noise to each adaptive
    trial; any positive value re-enables the median-of-three protocol, which
    at sigma = 0 would just run the same trial three times.
    """

    f_init_n: float = 0.25
    f_step_n: float = 0.25
    grid_n: float = 0.25
    g_mps2: float = 9.81
    f_max_n: float = 20.0
    noise_sigma_n: float = 0.0

    def __post_init__(self):
        for name in ("f_init_n", "f_step_n", "grid_n", "g_mps2", "f_max_n"):
            if getattr(self, name) <= 0:
                raise InvalidArgument(f"{name} must be positive")
        if self.f_init_n > self.f_max_n:
            raise InvalidArgument("f_init_n must not exceed f_max_n")
        if self.noise_sigma_n < 0:
            raise InvalidArgument("noise_sigma_n must be non-negative")


@dataclass(frozen=True)
class SyntheticObject:
    """Ground-truth parameters for one simulated object."""

    mass_kg: float
    mu_eff: float
    label: str
    category: Category

    def __post_init__(self):
        if not (self.mass_kg > 0) or not math.isfinite(self.mass_kg):
            raise InvalidArgument("mass_kg must be positive and finite")
        if not (self.mu_eff > 0) or not math.isfinite(self.mu_eff):
            raise InvalidArgument("mu_eff must be positive and finite")


def ceil_to_grid(value: float, grid: float) -> float:
    """Smallest grid multiple >= value (tiny epsilon so exact multiples stay put)."""
    if grid <= 0:
        raise InvalidArgument("grid must be positive")
    steps = math.ceil(value / grid - 1e-9)
    return steps * grid


def closed_form_fstar(obj: SyntheticObject, cfg: OracleConfig = OracleConfig()) -> float:
    """Minimum feasible grasp force, straight from the slip condition."""
    required = obj.mass_kg * cfg.g_mps2 / obj.mu_eff
    fstar = ceil_to_grid(max(cfg.f_init_n, required), cfg.grid_n)
    if fstar > cfg.f_max_n + 1e-9:
        raise ForceCapExceeded(
            f"needs {fstar:.2f} N, cap is {cfg.f_max_n:.2f} N (mass {obj.mass_kg} kg)")
    return fstar


def adaptive_force_search(obj: SyntheticObject, cfg: OracleConfig = OracleConfig(),
                          rng: np.random.Generator | None = None) -> tuple[float, int]:
    """Simulated measurement: tighten one step per slip until the object holds.

    Returns (f_star_n, n_slip_events). With noise_sigma_n > 0 each trial's
    final force picks up Gaussian noise and the median of three trials wins;
    rng is then required.
    """
    weight = obj.mass_kg * cfg.g_mps2
    noisy = cfg.noise_sigma_n > 0
    if noisy and rng is None:
        raise InvalidArgument("rng is required when noise_sigma_n > 0")

    def one_trial() -> tuple[float, int]:
        force = cfg.f_init_n
        slips = 0
        while obj.mu_eff * force < weight:
            if force + cfg.f_step_n > cfg.f_max_n + 1e-9:
                raise ForceCapExceeded(
                    f"search passed the {cfg.f_max_n:.2f} N cap (mass {obj.mass_kg} kg)")
            force += cfg.f_step_n
            slips += 1
        measured = force + (float(rng.normal(0.0, cfg.noise_sigma_n)) if noisy else 0.0)
        return measured, slips

    trials = [one_trial() for _ in range(3 if noisy else 1)]
    trials.sort(key=lambda t: t[0])
    measured, slips = trials[len(trials) // 2]
    fstar = ceil_to_grid(max(cfg.f_init_n, measured), cfg.grid_n)
    if fstar > cfg.f_max_n + 1e-9:
        raise ForceCapExceeded(f"measured {fstar:.2f} N exceeds the cap")
    return fstar, slips


# --- band tokens -----------------------------------------------------------


def mass_band(mass_kg: float) -> int:
    lo, hi = MASS_RANGE_KG
    pos = (math.log(mass_kg) - math.log(lo)) / (math.log(hi) - math.log(lo))
    return min(MASS_BAND_COUNT - 1, max(0, int(pos * MASS_BAND_COUNT)))


def grip_band(mu_eff: float) -> int:
    lo, hi = MU_RANGE
    pos = (math.log(mu_eff) - math.log(lo)) / (math.log(hi) - math.log(lo))
    return min(GRIP_BAND_COUNT - 1, max(0, int(pos * GRIP_BAND_COUNT)))


_HEFT_WORDS = ("featherweight", "light", "medium-weight", "hefty")
_FEEL_WORDS = ("slick", "smooth", "grippy", "tacky")


def format_band_description(label: str, mass_kg: float, mu_eff: float) -> str:
    """Render the synthetic description carrying both band tokens."""
    mb = mass_band(mass_kg)
    gb = grip_band(mu_eff)
    heft = _HEFT_WORDS[min(3, mb * 4 // MASS_BAND_COUNT)]
    feel = _FEEL_WORDS[min(3, gb * 4 // GRIP_BAND_COUNT)]
    return (
        f"A {label} set out for handling trials. "
        f"Apparent heft: {heft}, mass band {mb} of {MASS_BAND_COUNT}. "
        f"Surface feel: {feel}, grip band {gb} of {GRIP_BAND_COUNT}. "
        f"Rigid body, matte finish."
    )


def parse_band_tokens(text: str) -> tuple[float, float] | None:
    """Extract (mass, grip) band centers as fractions in [0, 1], or None.

    The fraction form keeps consumers independent of the band counts the
    text happens to use.
    """
    m = _BAND_RE.search(text)
    g = _GRIP_RE.search(text)
    if not m or not g:
        return None
    m_idx, m_total = int(m.group(1)), int(m.group(2))
    g_idx, g_total = int(g.group(1)), int(g.group(2))
    if m_total <= 0 or g_total <= 0 or m_idx >= m_total or g_idx >= g_total:
        return None
    return (m_idx + 0.5) / m_total, (g_idx + 0.5) / g_total


# --- synthetic generation ----------------------------------------------------


_SHAPE_BY_CATEGORY = {
    Category.BOTTLES: "bottle",
    Category.CYLINDERS: "cylinder",
    Category.CUBOIDS: "box",
    Category.FRAGILE_HEAVY: "glass jar",
    Category.FRAGILE_LIGHT: "paper cup",
    Category.ODD_SHAPES: "figurine",
}

_COLORS = (
    ("teal", (0, 128, 128)),
    ("maroon", (128, 0, 0)),
    ("olive", (128, 128, 0)),
    ("navy", (0, 0, 128)),
    ("coral", (255, 127, 80)),
    ("slate", (112, 128, 144)),
    ("amber", (255, 191, 0)),
    ("plum", (142, 69, 133)),
)

_CATEGORIES = tuple(Category)


def synthetic_params(n: int, seed: int) -> list[SyntheticObject]:
    """The deterministic parameter draw behind generate_synthetic_pool.

    Masses are log-uniform over MASS_RANGE_KG; grip ratios uniform over
    MU_RANGE (a compliant gripper grips well, so the ratio can exceed 1).
    Exposed separately so tests can re-derive ground truth per record.
    """
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    rng = np.random.default_rng(seed)
    log_lo, log_hi = math.log(MASS_RANGE_KG[0]), math.log(MASS_RANGE_KG[1])
    objects = []
    for i in range(n):
        mass = math.exp(float(rng.uniform(log_lo, log_hi)))
        mu = float(rng.uniform(*MU_RANGE))
        category = _CATEGORIES[int(rng.integers(len(_CATEGORIES)))]
        color, _ = _COLORS[int(rng.integers(len(_COLORS)))]
        label = f"{color} {_SHAPE_BY_CATEGORY[category]}"
        objects.append(SyntheticObject(mass, mu, label, category))
    return objects


def _record_color(label: str) -> tuple[int, int, int]:
    for color, rgb in _COLORS:
        if label.startswith(color):
            return rgb
    crc = zlib.crc32(label.encode("utf-8"))
    return (crc & 0xFF, (crc >> 8) & 0xFF, (crc >> 16) & 0xFF)


def generate_synthetic_pool(n: int, seed: int, root: str | Path,
                            cfg: OracleConfig = OracleConfig()) -> Pool:
    """Write a fully valid synthetic pool (manifest plus placeholder images).

    Record ids are synth-0000 style; every f_star_n comes from the closed
    form over the drawn parameters. Re-running with the same n and seed
    reproduces the manifest and image bytes exactly.
    """
    root = Path(root)
    (root / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    records = []
    for i, obj in enumerate(synthetic_params(n, seed)):
        rec_id = f"synth-{i:04d}"
        image_ref = f"{IMAGES_DIR}/{rec_id}.png"
        img = Image.new("RGB", (16, 16), color=_record_color(obj.label))
        # Image bytes must be unique per record: stubs key on the image digest.
        img.putpixel((0, 0), (i & 0xFF, (i >> 8) & 0xFF, 0xFF))
        img.save(root / image_ref)
        records.append(ExperienceRecord(
            id=rec_id,
            name=obj.label,
            mass_kg=obj.mass_kg,
            description=format_band_description(obj.label, obj.mass_kg, obj.mu_eff),
            image_ref=image_ref,
            f_star_n=closed_form_fstar(obj, cfg),
            category=obj.category,
        ))
    pool = Pool(tuple(records))
    save_pool(pool, root)
    return pool
