import pytest

from conftest import make_record, png_bytes
from expforce.errors import ConfigError, EmptyDescription, MissingImage, Unparseable
from expforce.gateway import prompt_fingerprint
from expforce.prompting import (
    DESCRIPTOR,
    PREDICTOR,
    DEFAULT_EMBODIMENT_TEXT,
    PromptTemplates,
    SharedContext,
    build_descriptor_prompt,
    build_predictor_prompt,
    default_templates,
    describe_object,
    extract_experience_forces,
    lint_prompt_text,
    parse_force,
    serialize_experience,
)
from expforce.stubs import StubCompletionBackend

QUERY_IMAGE = png_bytes(tag=999)


def _ctx(**overrides):
    return SharedContext.from_templates(**overrides)


# --- templates ---------------------------------------------------------------


def test_packaged_templates_render_with_force_grid():
    templates = default_templates()
    assert "0.25" in templates.pred_instruction
    assert "20.00" in templates.pred_instruction
    assert "FORCE_N:" in templates.pred_instruction
    assert "{force_floor_n}" not in templates.context


def test_templates_load_from_directory(tmp_path):
    for name, text in [("context.txt", "Task: pick things up."),
                       ("desc_instruction.txt", "Describe the object."),
                       ("pred_instruction.txt", "Answer FORCE_N: <x>.")]:
        (tmp_path / name).write_text(text, encoding="utf-8")
    templates = PromptTemplates.load(tmp_path)
    assert templates.context == "Task: pick things up."


def test_missing_template_file(tmp_path):
    with pytest.raises(ConfigError):
        PromptTemplates.load(tmp_path)


def test_bad_placeholder_is_a_config_error():
    broken = PromptTemplates(context="{not_a_placeholder}", desc_instruction="x",
                             pred_instruction="y")
    with pytest.raises(ConfigError):
        broken.render()


def test_default_templates_lint_clean():
    templates = default_templates()
    for text in (templates.context, templates.desc_instruction,
                 templates.pred_instruction, DEFAULT_EMBODIMENT_TEXT):
        assert lint_prompt_text(text) == []


def test_lint_flags_analytic_leaks():
    assert lint_prompt_text("use the coefficient of grip") != []
    assert lint_prompt_text("assume friction is high") != []
    assert lint_prompt_text("F = W over the contact") != []
    assert lint_prompt_text("take μ as 0.4") != []
    assert lint_prompt_text("so weight / mu gives the answer") != []


# --- descriptor bundle -------------------------------------------------------


def test_descriptor_bundle_layout(tmp_path):
    emb = tmp_path / "gripper.png"
    scale = tmp_path / "scale.png"
    emb.write_bytes(png_bytes(tag=1))
    scale.write_bytes(png_bytes(tag=2))
    ctx = _ctx(embodiment_image_ref=emb, scale_reference_image_ref=scale)

    bundle = build_descriptor_prompt(ctx, QUERY_IMAGE)
    assert bundle.kind == DESCRIPTOR
    assert bundle.k_used == 0
    (message,) = bundle.messages
    kinds = [seg.kind for seg in message.segments]
    assert kinds == ["text", "image", "image", "text", "image"]
    assert message.segments[0].payload.startswith(ctx.task_objective)
    assert DEFAULT_EMBODIMENT_TEXT in message.segments[0].payload
    assert message.segments[1].payload == emb.read_bytes()
    assert message.segments[2].payload == scale.read_bytes()
    assert message.segments[3].payload == default_templates().desc_instruction.strip()
    assert message.segments[4].payload == QUERY_IMAGE


def test_embodiment_ablation_drops_text_and_image(tmp_path):
    emb = tmp_path / "gripper.png"
    scale = tmp_path / "scale.png"
    emb.write_bytes(png_bytes(tag=1))
    scale.write_bytes(png_bytes(tag=2))
    ctx = _ctx(embodiment_image_ref=emb, scale_reference_image_ref=scale,
               include_embodiment=False)

    (message,) = build_descriptor_prompt(ctx, QUERY_IMAGE).messages
    kinds = [seg.kind for seg in message.segments]
    assert kinds == ["text", "image", "text", "image"]
    assert DEFAULT_EMBODIMENT_TEXT not in message.segments[0].payload
    assert message.segments[1].payload == scale.read_bytes()


def test_descriptor_requires_query_image():
    with pytest.raises(MissingImage):
        build_descriptor_prompt(_ctx(), b"")


def test_missing_embodiment_image_file(tmp_path):
    ctx = _ctx(embodiment_image_ref=tmp_path / "nope.png")
    with pytest.raises(MissingImage):
        build_descriptor_prompt(ctx, QUERY_IMAGE)


# --- predictor bundle --------------------------------------------------------


def _experiences(n):
    return [(make_record(i), png_bytes(tag=i + 1)) for i in range(n)]


def test_predictor_bundle_with_three_experiences():
    (message,) = build_predictor_prompt(_ctx(), _experiences(3), QUERY_IMAGE).messages
    kinds = [seg.kind for seg in message.segments]
    assert kinds == ["text", "text", "image", "text", "image", "text", "image",
                     "text", "image"]
    assert "Prior grasp 1:" in message.segments[1].payload
    assert "Prior grasp 2:" in message.segments[3].payload
    assert "Prior grasp 3:" in message.segments[5].payload
    assert "Minimum lifting force: 0.25 N" in message.segments[1].payload
    assert message.segments[2].payload == png_bytes(tag=1)
    assert message.segments[-1].payload == QUERY_IMAGE
    assert extract_experience_forces(message.text()) == [0.25, 0.50, 0.75]


def test_predictor_zero_experiences_equals_zero_shot_layout():
    bundle = build_predictor_prompt(_ctx(), [], QUERY_IMAGE)
    assert bundle.kind == PREDICTOR
    assert bundle.k_used == 0
    (message,) = bundle.messages
    assert [seg.kind for seg in message.segments] == ["text", "text", "image"]


def test_predictor_bundles_are_pure():
    a = build_predictor_prompt(_ctx(), _experiences(2), QUERY_IMAGE)
    b = build_predictor_prompt(_ctx(), _experiences(2), QUERY_IMAGE)
    assert a == b
    assert prompt_fingerprint(a.messages) == prompt_fingerprint(b.messages)


def test_experience_without_image_rejected():
    experiences = [(make_record(0), b"")]
    with pytest.raises(MissingImage):
        build_predictor_prompt(_ctx(), experiences, QUERY_IMAGE)


def test_serialize_experience_exact_text():
    record = make_record(0, name="glass jar", mass_kg=0.312, f_star_n=1.5,
                         description="A squat glass jar with a metal lid.")
    assert serialize_experience(2, record) == (
        "Prior grasp 2:\n"
        "Object: glass jar\n"
        "Measured mass: 0.312 kg\n"
        "Notes: A squat glass jar with a metal lid.\n"
        "Minimum lifting force: 1.50 N"
    )


# --- response parsing --------------------------------------------------------


def test_parse_force_takes_last_force_line():
    parsed = parse_force("FORCE_N: 2.0\nsecond thoughts\nFORCE_N: 1.25")
    assert parsed.value_n == 1.25
    assert not parsed.clamped


def test_parse_force_unit_fallback():
    assert parse_force("I would use about 5.5 N of force.").value_n == 5.5
    assert parse_force("roughly 3 newtons should do").value_n == 3.0


def test_parse_force_prefers_force_line_over_prose():
    parsed = parse_force("the jar weighs 9 N\nFORCE_N: 2.5")
    assert parsed.value_n == 2.5


def test_parse_force_unparseable():
    with pytest.raises(Unparseable):
        parse_force("I cannot tell.")
    with pytest.raises(Unparseable):
        parse_force("")


def test_parse_force_clamps_out_of_range():
    high = parse_force("FORCE_N: 100")
    assert (high.value_n, high.raw_value_n, high.clamped) == (20.0, 100.0, True)
    low = parse_force("FORCE_N: 0.1")
    assert (low.value_n, low.clamped) == (0.25, True)
    negative = parse_force("FORCE_N: -2")
    assert (negative.value_n, negative.clamped) == (0.25, True)


def test_parse_force_round_trips_every_grid_value():
    for step in range(1, 81):
        value = step * 0.25
        parsed = parse_force(f"FORCE_N: {value:.2f}")
        assert parsed.value_n == value
        assert not parsed.clamped


# --- describe_object ---------------------------------------------------------


def test_describe_object_strips_and_returns():
    bundle = build_descriptor_prompt(_ctx(), QUERY_IMAGE)
    stub = StubCompletionBackend(
        {prompt_fingerprint(bundle.messages): "  A heavy green bottle. \n"})
    assert describe_object(_ctx(), QUERY_IMAGE, stub) == "A heavy green bottle."


def test_describe_object_rejects_empty():
    stub = StubCompletionBackend(default_response="   ")
    with pytest.raises(EmptyDescription):
        describe_object(_ctx(), QUERY_IMAGE, stub)
