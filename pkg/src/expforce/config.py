"""Run configuration: INI file parsing and endpoint construction.

Default configuration is fully offline (lookup-stub descriptor, echo-stub
predictor, mock embeddings), so every command works with no keys and no
network. Remote endpoints are switched on per role in the [endpoints]
section; API keys are only ever read from the environment variable each
endpoint names, never from flags or the file itself.

Precedence everywhere: command-line flags > config file > built-in defaults.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .errors import ConfigError
from .gateway import (
    CachedEmbeddingProvider,
    EmbeddingCache,
    Gateway,
    ModelEndpointConfig,
    RemoteCompletionBackend,
    RemoteEmbeddingProvider,
)
from .oracle import OracleConfig
from .pool import Pool
from .prompting import PromptTemplates, SharedContext
from .stubs import ForceEchoStub, LookupDescriptionStub, MockBandEmbeddingProvider

CONFIG_ENV_VAR = "EXPFORCE_CONFIG"

_ROLES = ("descriptor", "predictor", "embedding")
_STUB_KINDS = {"descriptor": "stub", "predictor": "stub", "embedding": "mock"}


@dataclass(frozen=True)
class StubSettings:
    """Knobs for the offline backends."""

    predictor_mode: str = "mean"
    fixed_force_n: float = 1.0
    fixed_text: str = "I cannot tell."
    descriptor_text: str = LookupDescriptionStub.DEFAULT_TEXT


@dataclass(frozen=True)
class RunConfig:
    """One run's worth of configuration, already validated."""

    seed: int = 0
    concurrency_limit: int = 4
    cache_dir: Path | None = None
    template_dir: Path | None = None
    include_embodiment: bool = True
    embodiment_image: Path | None = None
    scale_reference_image: Path | None = None
    oracle: OracleConfig = field(default_factory=OracleConfig)
    endpoint_kinds: dict = field(default_factory=lambda: dict(_STUB_KINDS))
    endpoints: dict = field(default_factory=dict)
    stub: StubSettings = field(default_factory=StubSettings)

    def __post_init__(self):
        if self.concurrency_limit < 1:
            raise ConfigError("concurrency_limit must be >= 1")
        for name in ("template_dir", "embodiment_image", "scale_reference_image"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                raise ConfigError(f"{name} does not exist: {path}")
        for role, kind in self.endpoint_kinds.items():
            if role not in _ROLES:
                raise ConfigError(f"unknown endpoint role {role!r}")
            allowed = ("stub", "remote") if role != "embedding" else ("mock", "remote")
            if kind not in allowed:
                raise ConfigError(f"endpoint {role} must be one of {allowed}, got {kind!r}")
            if kind == "remote" and role not in self.endpoints:
                raise ConfigError(f"endpoint {role} is remote but has no [endpoints.{role}] section")


def _get(parser: configparser.ConfigParser, section: str, option: str, getter: str, fallback):
    if not parser.has_option(section, option):
        return fallback
    try:
        return getattr(parser, getter)(section, option)
    except ValueError as exc:
        raise ConfigError(f"[{section}] {option}: {exc}") from exc


def _endpoint_from(parser: configparser.ConfigParser, section: str) -> ModelEndpointConfig:
    missing = [opt for opt in ("base_url", "model_name", "api_key_env")
               if not parser.has_option(section, opt)]
    if missing:
        raise ConfigError(f"[{section}] missing required option {missing[0]!r}")
    return ModelEndpointConfig(
        base_url=parser.get(section, "base_url"),
        model_name=parser.get(section, "model_name"),
        api_key_env=parser.get(section, "api_key_env"),
        timeout_s=_get(parser, section, "timeout_s", "getfloat", 60.0),
        max_retries=_get(parser, section, "max_retries", "getint", 3),
        temperature=_get(parser, section, "temperature", "getfloat", 0.0),
    )


def load_run_config(path: str | Path | None = None) -> RunConfig:
    """Load a RunConfig from an INI file.

    With path None, the EXPFORCE_CONFIG environment variable is consulted;
    if that is unset too, built-in defaults apply.
    """
    if path is None:
        env = os.environ.get(CONFIG_ENV_VAR, "")
        path = Path(env) if env else None
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser()
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc

    def path_or_none(section: str, option: str) -> Path | None:
        raw = _get(parser, section, option, "get", None)
        return Path(raw) if raw else None

    oracle = OracleConfig(
        f_init_n=_get(parser, "oracle", "f_init_n", "getfloat", 0.25),
        f_step_n=_get(parser, "oracle", "f_step_n", "getfloat", 0.25),
        grid_n=_get(parser, "oracle", "grid_n", "getfloat", 0.25),
        g_mps2=_get(parser, "oracle", "g_mps2", "getfloat", 9.81),
        f_max_n=_get(parser, "oracle", "f_max_n", "getfloat", 20.0),
        noise_sigma_n=_get(parser, "oracle", "noise_sigma_n", "getfloat", 0.0),
    )
    endpoint_kinds = dict(_STUB_KINDS)
    for role in _ROLES:
        endpoint_kinds[role] = _get(parser, "endpoints", role, "get", endpoint_kinds[role])
    endpoints = {}
    for role in _ROLES:
        section = f"endpoints.{role}"
        if parser.has_section(section):
            endpoints[role] = _endpoint_from(parser, section)
    stub = StubSettings(
        predictor_mode=_get(parser, "stub", "predictor_mode", "get", "mean"),
        fixed_force_n=_get(parser, "stub", "fixed_force_n", "getfloat", 1.0),
        fixed_text=_get(parser, "stub", "fixed_text", "get", "I cannot tell."),
        descriptor_text=_get(parser, "stub", "descriptor_text", "get",
                             LookupDescriptionStub.DEFAULT_TEXT),
    )
    return RunConfig(
        seed=_get(parser, "run", "seed", "getint", 0),
        concurrency_limit=_get(parser, "run", "concurrency_limit", "getint", 4),
        cache_dir=path_or_none("run", "cache_dir"),
        template_dir=path_or_none("prompts", "template_dir"),
        include_embodiment=_get(parser, "context", "include_embodiment", "getboolean", True),
        embodiment_image=path_or_none("context", "embodiment_image"),
        scale_reference_image=path_or_none("context", "scale_reference_image"),
        oracle=oracle,
        endpoint_kinds=endpoint_kinds,
        endpoints=endpoints,
        stub=stub,
    )


def override(cfg: RunConfig, **fields) -> RunConfig:
    """Apply non-None flag overrides on top of a loaded config."""
    updates = {k: v for k, v in fields.items() if v is not None}
    return replace(cfg, **updates) if updates else cfg


def build_templates(cfg: RunConfig) -> PromptTemplates:
    return PromptTemplates.load(cfg.template_dir).render(
        force_floor_n=cfg.oracle.f_init_n, force_cap_n=cfg.oracle.f_max_n)


def build_context(cfg: RunConfig, templates: PromptTemplates | None = None) -> SharedContext:
    templates = templates or build_templates(cfg)
    return SharedContext.from_templates(
        templates,
        include_embodiment=cfg.include_embodiment,
        embodiment_image_ref=cfg.embodiment_image,
        scale_reference_image_ref=cfg.scale_reference_image,
    )


def build_gateway(cfg: RunConfig, pool: Pool | None = None,
                  pool_root: str | Path | None = None) -> Gateway:
    """Construct the three endpoint roles a run will use.

    The stub descriptor answers stored descriptions when a pool is at hand
    (so offline pipelines reproduce precomputed embeddings), else a fixed
    text. A cache_dir wraps whichever embedding provider is selected.
    """
    kind = cfg.endpoint_kinds
    if kind["descriptor"] == "remote":
        descriptor = RemoteCompletionBackend(cfg.endpoints["descriptor"])
    elif pool is not None and pool_root is not None:
        descriptor = LookupDescriptionStub.from_pool(pool, pool_root,
                                                     default_description=cfg.stub.descriptor_text)
    else:
        descriptor = LookupDescriptionStub(default_description=cfg.stub.descriptor_text)

    if kind["predictor"] == "remote":
        predictor = RemoteCompletionBackend(cfg.endpoints["predictor"])
    else:
        predictor = ForceEchoStub(mode=cfg.stub.predictor_mode,
                                  default_n=cfg.stub.fixed_force_n,
                                  fixed_text=cfg.stub.fixed_text)

    if kind["embedding"] == "remote":
        embedder = RemoteEmbeddingProvider(cfg.endpoints["embedding"])
    else:
        embedder = MockBandEmbeddingProvider()
    if cfg.cache_dir is not None:
        embedder = CachedEmbeddingProvider(embedder, EmbeddingCache(cfg.cache_dir))
    return Gateway(descriptor=descriptor, predictor=predictor, embedder=embedder)
