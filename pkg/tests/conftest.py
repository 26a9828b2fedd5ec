"""Shared fixtures and tiny test doubles."""

from __future__ import annotations

from io import BytesIO
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from expforce.gateway import EmbeddingVector
from expforce.oracle import generate_synthetic_pool
from expforce.pool import Category, ExperienceRecord, Pool, save_pool


def png_bytes(color=(10, 20, 30), size=(8, 8), tag: int = 0) -> bytes:
    img = Image.new("RGB", size, color)
    if tag:
        img.putpixel((0, 0), (tag & 0xFF, (tag >> 8) & 0xFF, 255))
    buf = BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def make_record(i: int = 0, **overrides) -> ExperienceRecord:
    fields = dict(
        id=f"rec-{i:03d}",
        name=f"object {i}",
        mass_kg=0.1 + 0.05 * i,
        description=f"A plain test object number {i}.",
        image_ref=f"images/rec-{i:03d}.png",
        f_star_n=0.25 * (i + 1),
        category=list(Category)[i % 6],
    )
    fields.update(overrides)
    return ExperienceRecord(**fields)


def write_pool(root: Path, records) -> Pool:
    """Materialize records as a loadable pool directory with unique images."""
    (root / "images").mkdir(parents=True, exist_ok=True)
    for idx, rec in enumerate(records):
        (root / rec.image_ref).write_bytes(png_bytes(tag=idx + 1))
    pool = Pool(tuple(records))
    save_pool(pool, root)
    return pool


def unit_vec(*values, provider: str = "test") -> EmbeddingVector:
    arr = np.asarray(values, dtype=np.float64)
    return EmbeddingVector(arr, provider, arr.size)


class CountingEmbedder:
    """Counts embed calls; otherwise transparent."""

    def __init__(self, inner):
        self.inner = inner
        self.provider_id = inner.provider_id
        self.calls = 0

    def embed(self, image: bytes, description: str) -> EmbeddingVector:
        self.calls += 1
        return self.inner.embed(image, description)

    def fingerprint(self) -> str:
        return self.inner.fingerprint()


class RecordingBackend:
    """Completion backend that records every prompt it sees."""

    def __init__(self, response: str = "FORCE_N: 1.0"):
        self.response = response
        self.prompts: list[tuple] = []

    def complete(self, messages) -> str:
        self.prompts.append(tuple(messages))
        return self.response

    def fingerprint(self) -> str:
        return f"recording:{self.response}"


@pytest.fixture(scope="session")
def synth129(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth129")
    pool = generate_synthetic_pool(129, 7, root)
    return pool, root


@pytest.fixture(scope="session")
def synth500(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth500")
    pool = generate_synthetic_pool(500, 11, root)
    return pool, root


@pytest.fixture(scope="session")
def synth_queries(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthq100")
    pool = generate_synthetic_pool(100, 23, root)
    return pool, root
