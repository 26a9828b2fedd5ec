"""Deterministic offline stand-ins for the three endpoint roles.

These make the entire toolkit runnable with no network and no keys: a
canned-response completion stub, force-echo predictor stubs that read the
assembled prompt, a descriptor stub that answers with stored descriptions,
and a mock embedding provider that understands the synthetic band tokens.
Everything here is a pure function of its inputs, so full evaluation runs
reproduce byte-identically.
"""

from __future__ import annotations

import hashlib
from statistics import fmean
from typing import Mapping, Sequence

import numpy as np

from .errors import InvalidArgument
from .gateway import EmbeddingVector, MultimodalMessage, prompt_fingerprint
from .oracle import parse_band_tokens
from .pool import Pool, load_image
from .prompting import extract_experience_forces


def _stable_digest(*parts: bytes) -> str:
    h = hashlib.sha256()
    for part in parts:
        h.update(len(part).to_bytes(8, "big"))
        h.update(part)
    return h.hexdigest()


class StubCompletionBackend:
    """Answers from a canned map keyed by prompt fingerprint.

    Unknown prompts get default_response. Useful when a test wants one exact
    response for one exact prompt.
    """

    def __init__(self, canned: Mapping[str, str] | None = None,
                 default_response: str = "FORCE_N: 1.0"):
        self.canned = dict(canned or {})
        self.default_response = default_response
        self.calls = 0

    def complete(self, messages: Sequence[MultimodalMessage]) -> str:
        self.calls += 1
        return self.canned.get(prompt_fingerprint(messages), self.default_response)

    def fingerprint(self) -> str:
        body = _stable_digest(
            repr(sorted(self.canned.items())).encode(), self.default_response.encode())
        return f"stub-canned:{body}"


class ForceEchoStub:
    """Predictor stub that answers with an aggregate of in-prompt forces.

    mode "mean" averages the experience-block forces found in the prompt (in
    block order, same reduction as the nearest-neighbour baseline), "max"
    takes the largest, "fixed" always answers default_n, and "text" answers
    a verbatim string (handy for forcing parse failures). Prompts without
    experience blocks fall back to default_n.
    """

    _MODES = ("mean", "max", "fixed", "text")

    def __init__(self, mode: str = "mean", default_n: float = 1.0,
                 fixed_text: str = "I cannot tell."):
        if mode not in self._MODES:
            raise InvalidArgument(f"mode must be one of {self._MODES}")
        self.mode = mode
        self.default_n = default_n
        self.fixed_text = fixed_text
        self.calls = 0

    def complete(self, messages: Sequence[MultimodalMessage]) -> str:
        self.calls += 1
        if self.mode == "text":
            return self.fixed_text
        if self.mode == "fixed":
            return f"FORCE_N: {self.default_n!r}"
        forces: list[float] = []
        for msg in messages:
            forces.extend(extract_experience_forces(msg.text()))
        if not forces:
            return f"FORCE_N: {self.default_n!r}"
        value = fmean(forces) if self.mode == "mean" else max(forces)
        return f"FORCE_N: {value!r}"

    def fingerprint(self) -> str:
        body = _stable_digest(self.mode.encode(), repr(self.default_n).encode(),
                              self.fixed_text.encode())
        return f"stub-echo:{body}"


class LookupDescriptionStub:
    """Descriptor stub keyed by the digest of the query image.

    The query image is always the last image segment of a descriptor bundle.
    Built from a pool it answers each record's stored description, which
    makes the full pipeline reproduce precomputed embeddings exactly.
    """

    DEFAULT_TEXT = ("A small rigid household object on a plain background, "
                    "apparently light and easy to hold.")

    def __init__(self, by_image_digest: Mapping[str, str] | None = None,
                 default_description: str = DEFAULT_TEXT):
        self.by_image_digest = dict(by_image_digest or {})
        self.default_description = default_description
        self.calls = 0

    @classmethod
    def from_pool(cls, pool: Pool, root, default_description: str = DEFAULT_TEXT):
        mapping = {
            _stable_digest(load_image(root, rec)): rec.description
            for rec in pool
        }
        return cls(mapping, default_description)

    def complete(self, messages: Sequence[MultimodalMessage]) -> str:
        self.calls += 1
        images = [img for msg in messages for img in msg.images()]
        if not images:
            return self.default_description
        return self.by_image_digest.get(_stable_digest(images[-1]), self.default_description)

    def fingerprint(self) -> str:
        body = _stable_digest(
            repr(sorted(self.by_image_digest.items())).encode(),
            self.default_description.encode())
        return f"stub-lookup:{body}"


class MockBandEmbeddingProvider:
    """Offline embedding provider keyed to the synthetic band tokens.

    Layout of the 128-dim vector: a 64-dim mass block, a 32-dim grip block,
    and a 32-dim noise block. The two band tokens become Gaussian bumps in
    their blocks (one band per coordinate), so cosine similarity decays
    smoothly with band distance and nearer physical parameters score higher.
    The noise block is a small hash-derived vector unique to the exact
    (image, description) pair, so distinct objects never collide exactly.

    Block weights are tuned so the induced metric weighs log-mass and
    log-grip distance the way the lifting force does: one band of mass is
    0.0783 in log-mass, one band of grip is 0.0503 in log-grip, and the
    force exponent has unit gradient in both, hence w_grip/w_mass =
    0.0503/0.0783. Descriptions without band tokens fall back to a pure
    hash vector: deterministic, but deliberately uninformative.
    """

    MASS_BLOCK = 64
    GRIP_BLOCK = 32
    NOISE_BLOCK = 32
    SIGMA = 2.0
    W_MASS = 1.0
    W_GRIP = 0.643
    W_NOISE = 0.05

    provider_id = "mock-band/1"

    def __init__(self):
        self.d = self.MASS_BLOCK + self.GRIP_BLOCK + self.NOISE_BLOCK
        self.calls = 0

    @staticmethod
    def _bump(block_len: int, center: float, sigma: float) -> np.ndarray:
        coords = np.arange(block_len, dtype=np.float64) + 0.5
        v = np.exp(-((coords - center) ** 2) / (2.0 * sigma * sigma))
        return v / np.linalg.norm(v)

    def _hash_unit(self, length: int, image: bytes, description: str) -> np.ndarray:
        digest = _stable_digest(image, description.encode("utf-8"),
                                self.provider_id.encode("utf-8"))
        rng = np.random.default_rng(int(digest[:16], 16))
        v = rng.standard_normal(length)
        return v / np.linalg.norm(v)

    def embed(self, image: bytes, description: str) -> EmbeddingVector:
        self.calls += 1
        bands = parse_band_tokens(description)
        if bands is None:
            values = self._hash_unit(self.d, image, description)
        else:
            mass_frac, grip_frac = bands
            mass = self.W_MASS * self._bump(self.MASS_BLOCK, mass_frac * self.MASS_BLOCK, self.SIGMA)
            grip = self.W_GRIP * self._bump(self.GRIP_BLOCK, grip_frac * self.GRIP_BLOCK, self.SIGMA)
            noise = self.W_NOISE * self._hash_unit(self.NOISE_BLOCK, image, description)
            values = np.concatenate([mass, grip, noise])
            values = values / np.linalg.norm(values)
        return EmbeddingVector(values, self.provider_id, self.d)

    def fingerprint(self) -> str:
        body = _stable_digest(repr((self.MASS_BLOCK, self.GRIP_BLOCK, self.NOISE_BLOCK,
                                    self.SIGMA, self.W_MASS, self.W_GRIP, self.W_NOISE)).encode())
        return f"{self.provider_id}:{body}"
