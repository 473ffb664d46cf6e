# app/core/run_config.py
"""
Config files and command-line overrides.

Files hold one `section.key = value` per line; `#` starts a comment.
Values are merged over the built-in defaults, then `--set` overrides are
merged over the file, and the result is validated as a RunConfig.
"""
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Type, get_args, get_origin
import logging

from pydantic import BaseModel, ValidationError

from app.core.errors import ConfigError, format_validation_error
from app.core.models import RunConfig

logger = logging.getLogger(__name__)

DEFAULT_CONFIG_NAME = "default"

# config section -> path inside RunConfig
SECTION_PATHS: Dict[str, Tuple[str, ...]] = {
    "model": ("model",),
    "data": ("data",),
    "bissl": ("bissl",),
    "cg": ("bissl", "cg"),
    "lower": ("bissl", "lower"),
    "upper": ("bissl", "upper"),
    "pretrain": ("pretrain",),
    "warmup": ("warmup",),
    "finetune": ("finetune",),
    "search": ("search",),
    "pipeline": ("pipeline",),
}

_NONE_LITERALS = {"none", "null", ""}


def _section_model(section: str) -> Type[BaseModel]:
    model: Type[BaseModel] = RunConfig
    for name in SECTION_PATHS[section]:
        model = model.model_fields[name].annotation
    return model


def _scalar_fields(section: str) -> Dict[str, Any]:
    """Fields of a section that are set from a single config value (nested sections excluded)."""
    out = {}
    for name, info in _section_model(section).model_fields.items():
        annotation = info.annotation
        if isinstance(annotation, type) and issubclass(annotation, BaseModel):
            continue
        out[name] = annotation
    return out


def _is_sequence(annotation: Any) -> bool:
    origin = get_origin(annotation)
    if origin in (list, tuple):
        return True
    return any(_is_sequence(arg) for arg in get_args(annotation) if arg is not type(None))


def _is_optional(annotation: Any) -> bool:
    return type(None) in get_args(annotation)


def resolve_key(key: str) -> Tuple[str, str]:
    """Map `section.key` or a bare key to its (section, field)."""
    key = key.strip()
    if "." in key:
        section, _, field = key.partition(".")
        if section not in SECTION_PATHS:
            raise ConfigError(f"Unknown config section '{section}'", details={"key": key})
        if field not in _scalar_fields(section):
            raise ConfigError(f"Unknown config key '{key}'", details={"section": section})
        return section, field

    owners = [s for s in SECTION_PATHS if key in _scalar_fields(s)]
    if not owners:
        raise ConfigError(f"Unknown config key '{key}'")
    if len(owners) > 1:
        raise ConfigError(
            f"Ambiguous config key '{key}'; qualify it with a section",
            details={"candidates": [f"{s}.{key}" for s in owners]},
        )
    return owners[0], key


def _coerce(section: str, field: str, raw: str) -> Any:
    annotation = _scalar_fields(section)[field]
    text = raw.strip()
    if _is_optional(annotation) and text.lower() in _NONE_LITERALS:
        return None
    if _is_sequence(annotation):
        return [item.strip() for item in text.split(",") if item.strip()]
    return text


def parse_config_text(text: str, source: str = "<config>") -> List[Tuple[str, str]]:
    """Parse `key = value` lines into (key, value) pairs in file order."""
    entries: List[Tuple[str, str]] = []
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        content = line.split("#", 1)[0].strip()
        if not content:
            continue
        if "=" not in content:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'", details={"line": line})
        key, _, value = content.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}'")
        seen.add(key)
        entries.append((key, value.strip()))
    return entries


def parse_override(item: str) -> Tuple[str, str]:
    if "=" not in item:
        raise ConfigError(f"Override '{item}' must look like key=value")
    key, _, value = item.partition("=")
    return key.strip(), value.strip()


def _apply(tree: Dict[str, Any], entries: Iterable[Tuple[str, str]]) -> None:
    for key, raw in entries:
        section, field = resolve_key(key)
        node = tree
        for name in SECTION_PATHS[section]:
            node = node[name]
        node[field] = _coerce(section, field, raw)


def read_config_file(config: Optional[str]) -> List[Tuple[str, str]]:
    if config is None or config == DEFAULT_CONFIG_NAME:
        return []
    path = Path(config)
    if not path.is_file():
        raise ConfigError(f"Config file not found: {config}")
    return parse_config_text(path.read_text(encoding="utf-8"), source=str(path))


def build_run_config(
    file_entries: Iterable[Tuple[str, str]] = (),
    overrides: Iterable[str] = (),
) -> RunConfig:
    """Defaults < file entries < overrides, validated."""
    tree = RunConfig().model_dump(mode="json")
    _apply(tree, file_entries)
    _apply(tree, (parse_override(item) for item in overrides))
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {format_validation_error(e)}") from e


def load_run_config(config: Optional[str] = None, overrides: Iterable[str] = ()) -> RunConfig:
    cfg = build_run_config(read_config_file(config), overrides)
    logger.debug(f"✅ Run config loaded from {config or DEFAULT_CONFIG_NAME}")
    return cfg


def _render(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, (list, tuple)):
        return ",".join(_render(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def config_items(cfg: RunConfig) -> List[Tuple[str, str]]:
    """Every config value as (`section.key`, text), in section order."""
    dumped = cfg.model_dump(mode="json")
    items = []
    for section, path in SECTION_PATHS.items():
        node = dumped
        for name in path:
            node = node[name]
        for field in _scalar_fields(section):
            items.append((f"{section}.{field}", _render(node[field])))
    return items


def render_config(cfg: RunConfig) -> str:
    return "\n".join(f"{key} = {value}" for key, value in config_items(cfg)) + "\n"
