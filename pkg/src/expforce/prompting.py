"""Prompt assembly for the descriptor and predictor endpoints.

Bundle layouts (see docs/prompts.md for the worked examples):

  descriptor: [context text] [embodiment image?] [scale image?]
              [describe instruction] [query image]
  predictor:  [context text] [embodiment image?] [scale image?]
              [experience 1 text] [experience 1 image] ... (rank order)
              [predict instruction] [query image]

With zero experiences the predictor bundle collapses to the zero-shot
prompt; assembly is a pure function, so equal inputs give byte-identical
bundles. Templates ship as package data and deliberately say nothing about
slip physics; lint_prompt_text enforces that and is wired into the tests.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Sequence

from .errors import ConfigError, EmptyDescription, InvalidArgument, MissingImage, Unparseable
from .gateway import CompletionBackend, MultimodalMessage, Segment, image_segment, text_segment
from .pool import ExperienceRecord

DESCRIPTOR = "descriptor"
PREDICTOR = "predictor"

FORCE_FLOOR_N = 0.25
FORCE_CAP_N = 20.0

_TEMPLATE_FILES = {
    "context": "context.txt",
    "desc_instruction": "desc_instruction.txt",
    "pred_instruction": "pred_instruction.txt",
}

_NUMBER = r"[+-]?(?:[0-9]+(?:\.[0-9]*)?|\.[0-9]+)"
_FORCE_LINE_RE = re.compile(rf"FORCE_N:\s*({_NUMBER})")
_UNIT_FALLBACK_RE = re.compile(rf"({_NUMBER})\s*(?:N\b|[Nn]ewtons?\b)")
_EXPERIENCE_FORCE_RE = re.compile(r"Minimum lifting force:\s*([0-9]+(?:\.[0-9]+)?) N")

_BANNED_PATTERNS = (
    re.compile(r"μ"),
    re.compile(r"coefficient", re.IGNORECASE),
    re.compile(r"friction", re.IGNORECASE),
    re.compile(r"\b(?:W|weight|mg)\s*/\s*(?:μ|mu)\b", re.IGNORECASE),
    re.compile(r"\bF\s*=\s*W\b"),
)

DEFAULT_EMBODIMENT_TEXT = (
    "Gripper details: a parallel-jaw hand with two compliant fin-style "
    "fingers that flex around curved surfaces, mounted on a robot arm. "
    "Finger pads are smooth polymer. A side photo of the gripper may "
    "accompany this message."
)


@dataclass(frozen=True)
class PromptTemplates:
    """The three prompt texts, before or after placeholder substitution."""

    context: str
    desc_instruction: str
    pred_instruction: str

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "PromptTemplates":
        """Read templates from a directory, or the packaged defaults."""
        if directory is None:
            return _packaged_templates()
        directory = Path(directory)
        texts = {}
        for key, filename in _TEMPLATE_FILES.items():
            path = directory / filename
            if not path.is_file():
                raise ConfigError(f"template file missing: {path}")
            texts[key] = path.read_text(encoding="utf-8")
        return cls(**texts)

    def render(self, force_floor_n: float = FORCE_FLOOR_N,
               force_cap_n: float = FORCE_CAP_N) -> "PromptTemplates":
        """Substitute the force-grid placeholders in all three texts."""
        values = {
            "force_floor_n": f"{force_floor_n:.2f}",
            "force_cap_n": f"{force_cap_n:.2f}",
        }
        rendered = {}
        for key in _TEMPLATE_FILES:
            text = getattr(self, key)
            try:
                rendered[key] = text.format(**values)
            except (KeyError, IndexError, ValueError) as exc:
                raise ConfigError(f"template {key!r} has a bad placeholder: {exc}") from exc
        return PromptTemplates(**rendered)


@lru_cache(maxsize=1)
def _packaged_templates() -> PromptTemplates:
    base = resources.files("expforce") / "templates"
    return PromptTemplates(**{
        key: (base / filename).read_text(encoding="utf-8")
        for key, filename in _TEMPLATE_FILES.items()
    })


@lru_cache(maxsize=1)
def default_templates() -> PromptTemplates:
    return _packaged_templates().render()


@dataclass(frozen=True)
class SharedContext:
    """The shared preamble: task framing plus optional embodiment and scale cues.

    include_embodiment=False drops both the embodiment text and its image,
    which is the embodiment-ablation switch.
    """

    task_objective: str
    embodiment_text: str = DEFAULT_EMBODIMENT_TEXT
    embodiment_image_ref: Path | None = None
    scale_reference_image_ref: Path | None = None
    include_embodiment: bool = True

    def __post_init__(self):
        if not self.task_objective.strip():
            raise InvalidArgument("task_objective must be non-empty")

    @classmethod
    def from_templates(cls, templates: PromptTemplates | None = None, **overrides) -> "SharedContext":
        templates = templates or default_templates()
        return cls(task_objective=templates.context.strip(), **overrides)


@dataclass(frozen=True)
class PromptBundle:
    """An assembled prompt, ready for a CompletionBackend."""

    messages: tuple[MultimodalMessage, ...]
    kind: str
    k_used: int

    def __post_init__(self):
        if self.kind not in (DESCRIPTOR, PREDICTOR):
            raise InvalidArgument(f"unknown bundle kind {self.kind!r}")
        if self.k_used < 0:
            raise InvalidArgument("k_used must be non-negative")
        if not self.messages:
            raise InvalidArgument("bundle must contain at least one message")


def _read_ref(ref: Path, what: str) -> bytes:
    try:
        return Path(ref).read_bytes()
    except OSError as exc:
        raise MissingImage(f"{what} image unreadable at {ref}: {exc}") from exc


def _context_segments(ctx: SharedContext) -> list[Segment]:
    text = ctx.task_objective
    if ctx.include_embodiment and ctx.embodiment_text:
        text = text + "\n\n" + ctx.embodiment_text
    segments = [text_segment(text)]
    if ctx.include_embodiment and ctx.embodiment_image_ref is not None:
        segments.append(image_segment(_read_ref(ctx.embodiment_image_ref, "embodiment")))
    if ctx.scale_reference_image_ref is not None:
        segments.append(image_segment(_read_ref(ctx.scale_reference_image_ref, "scale reference")))
    return segments


def _require_image(query_image: bytes) -> bytes:
    if not query_image:
        raise MissingImage("query image is required")
    return query_image


def build_descriptor_prompt(ctx: SharedContext, query_image: bytes,
                            instruction: str | None = None) -> PromptBundle:
    """Assemble the describe-this-object prompt."""
    instruction = instruction if instruction is not None else default_templates().desc_instruction
    segments = _context_segments(ctx)
    segments.append(text_segment(instruction.strip()))
    segments.append(image_segment(_require_image(query_image)))
    return PromptBundle((MultimodalMessage(tuple(segments)),), DESCRIPTOR, k_used=0)


def serialize_experience(rank: int, record: ExperienceRecord) -> str:
    """Text block for one retrieved experience; its photo follows separately."""
    return (
        f"Prior grasp {rank}:\n"
        f"Object: {record.name}\n"
        f"Measured mass: {record.mass_kg:.3f} kg\n"
        f"Notes: {record.description}\n"
        f"Minimum lifting force: {record.f_star_n:.2f} N"
    )


def extract_experience_forces(text: str) -> list[float]:
    """Pull the experience-block forces back out of assembled prompt text."""
    return [float(m) for m in _EXPERIENCE_FORCE_RE.findall(text)]


def build_predictor_prompt(ctx: SharedContext,
                           experiences: Sequence[tuple[ExperienceRecord, bytes]],
                           query_image: bytes,
                           instruction: str | None = None) -> PromptBundle:
    """Assemble the force-estimation prompt.

    experiences come as (record, image bytes) pairs in retrieval rank order
    and appear in that order. An empty sequence produces the zero-shot
    prompt, byte-identical to what a dedicated zero-shot caller builds.
    """
    instruction = instruction if instruction is not None else default_templates().pred_instruction
    segments = _context_segments(ctx)
    for rank, (record, image) in enumerate(experiences, start=1):
        segments.append(text_segment(serialize_experience(rank, record)))
        if not image:
            raise MissingImage(f"experience {record.id} has no image bytes")
        segments.append(image_segment(image))
    segments.append(text_segment(instruction.strip()))
    segments.append(image_segment(_require_image(query_image)))
    return PromptBundle((MultimodalMessage(tuple(segments)),), PREDICTOR, k_used=len(experiences))


@dataclass(frozen=True)
class ParsedForce:
    """A force pulled out of a model response, clamped onto the legal range."""

    value_n: float
    raw_value_n: float
    clamped: bool


def parse_force(response: str, floor_n: float = FORCE_FLOOR_N,
                cap_n: float = FORCE_CAP_N) -> ParsedForce:
    """Extract a force value from a predictor response.

    The last FORCE_N: line wins. Failing that, the last value carrying an
    N / newton unit anywhere in the text. Anything else is Unparseable.
    Out-of-range values clamp to [floor_n, cap_n] and are flagged.
    """
    matches = _FORCE_LINE_RE.findall(response)
    if not matches:
        matches = _UNIT_FALLBACK_RE.findall(response)
    if not matches:
        raise Unparseable(f"no force value found in response: {response[:120]!r}")
    raw = float(matches[-1])
    value = min(cap_n, max(floor_n, raw))
    return ParsedForce(value_n=value, raw_value_n=raw, clamped=(value != raw))


def describe_object(ctx: SharedContext, query_image: bytes,
                    descriptor: CompletionBackend, instruction: str | None = None) -> str:
    """Run the descriptor endpoint over the query image."""
    bundle = build_descriptor_prompt(ctx, query_image, instruction=instruction)
    text = descriptor.complete(bundle.messages)
    if not text or not text.strip():
        raise EmptyDescription("descriptor returned an empty description")
    return text.strip()


def lint_prompt_text(text: str) -> list[str]:
    """Return every analytic leak in a template text (empty list = clean).

    Flags the grip-ratio symbol, the token 'coefficient', the word
    'friction', and weight-over-grip formula shapes. Templates must let the
    model reason from prior examples, not hand it the slip condition.
    """
    found = []
    for pattern in _BANNED_PATTERNS:
        found.extend(m.group(0) for m in pattern.finditer(text))
    return found
