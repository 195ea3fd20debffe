"""Decomposed knowledge descriptions and grounding prompts.

An abnormality's clinical definition is combined with a set of visual
attributes into an LLM query; the returned description is folded into the
grounding prompt the detector is trained and evaluated with.
"""
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple
import logging
import re
import time

import requests
import yaml
from jinja2 import Environment, FileSystemLoader, StrictUndefined

from groundkit.database import ResponseCache
from groundkit.errors import BackendError, InputFileError, PromptError

logger = logging.getLogger(__name__)

TEMPLATES_DIR = Path(__file__).parent / "templates"
DATA_DIR = Path(__file__).parent / "data"
DEFAULT_DEFINITIONS = DATA_DIR / "definitions.yaml"
DEFAULT_DESCRIPTIONS = DATA_DIR / "descriptions.yaml"

DEFAULT_ATTRIBUTES = ("shape", "location", "density", "color")

LABEL_ONLY = "label_only"
KNOWLEDGE = "knowledge"
PROMPT_MODES = (LABEL_ONLY, KNOWLEDGE)
DEFAULT_LABEL_TEMPLATE = "Locate {name}."
DEFAULT_KNOWLEDGE_TEMPLATE = "Locate {name}: {description}"

_templates = Environment(
    loader=FileSystemLoader(str(TEMPLATES_DIR)),
    autoescape=False,
    undefined=StrictUndefined,
)

QUERY_NAME_RE = re.compile(r'^Here is the medical definition of (.+?): "')


@dataclass(frozen=True)
class AbnormalityDef:
    name: str
    definition: str
    source: Optional[str] = None


@dataclass(frozen=True)
class AttributeSet:
    attributes: Tuple[str, ...] = DEFAULT_ATTRIBUTES

    def __post_init__(self):
        attrs = tuple(a.strip() for a in self.attributes)
        if not attrs or not all(attrs):
            raise PromptError("attribute set must be nonempty")
        if len({a.casefold() for a in attrs}) != len(attrs):
            raise PromptError(f"attribute set has duplicates: {list(attrs)}")
        object.__setattr__(self, "attributes", attrs)


@dataclass(frozen=True)
class KnowledgeDescription:
    name: str
    description: str
    backend_id: str
    created_at: Optional[str] = None

    def __post_init__(self):
        if not self.description.strip():
            raise PromptError(f"empty description for {self.name}")


@dataclass
class GenerationResult:
    descriptions: List[KnowledgeDescription] = field(default_factory=list)
    missing: Dict[str, str] = field(default_factory=dict)
    backend_calls: int = 0

    @property
    def complete(self) -> bool:
        return not self.missing


class AbnormalityRegistry:
    """Definitions indexed case-insensitively by name."""

    def __init__(self, definitions: Iterable[AbnormalityDef] = ()):
        self._defs: Dict[str, AbnormalityDef] = {}
        for d in definitions:
            self.add(d)

    def add(self, d: AbnormalityDef):
        if not d.name.strip():
            raise PromptError("abnormality name must be nonempty")
        key = d.name.casefold()
        if key in self._defs:
            raise PromptError(f"duplicate abnormality name: {d.name}")
        self._defs[key] = d

    def get(self, name: str) -> Optional[AbnormalityDef]:
        return self._defs.get(name.casefold())

    def __iter__(self):
        return iter(self._defs.values())

    def __len__(self):
        return len(self._defs)


def _read_yaml(path) -> object:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return yaml.safe_load(f)
    except OSError as e:
        raise InputFileError(f"cannot read {path}: {e}")
    except yaml.YAMLError as e:
        raise InputFileError(f"cannot parse {path}: {e}")


def load_definitions(path=DEFAULT_DEFINITIONS) -> AbnormalityRegistry:
    data = _read_yaml(path) or {}
    entries = data.get("abnormalities", []) if isinstance(data, dict) else data
    registry = AbnormalityRegistry()
    for entry in entries:
        registry.add(AbnormalityDef(
            name=str(entry["name"]),
            definition=str(entry.get("definition", "")),
            source=entry.get("source"),
        ))
    logger.info("Loaded %d abnormality definitions from %s", len(registry), path)
    return registry


def load_descriptions(path=DEFAULT_DESCRIPTIONS) -> Dict[str, KnowledgeDescription]:
    """Read a descriptions file; keys are case-folded abnormality names."""
    data = _read_yaml(path) or {}
    entries = data.get("descriptions", []) if isinstance(data, dict) else data
    backend_id = data.get("backend", "file") if isinstance(data, dict) else "file"
    table: Dict[str, KnowledgeDescription] = {}
    for entry in entries:
        desc = KnowledgeDescription(
            name=str(entry["name"]),
            description=str(entry["description"]),
            backend_id=str(entry.get("backend", backend_id)),
        )
        table[desc.name.casefold()] = desc
    return table


def write_descriptions(path, descriptions: Sequence[KnowledgeDescription], missing: Dict[str, str] = None):
    """Write descriptions plus a provenance sidecar holding the timestamps."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ordered = sorted(descriptions, key=lambda d: d.name.casefold())
    body = {
        "descriptions": [
            {"name": d.name, "description": d.description, "backend": d.backend_id} for d in ordered
        ],
    }
    if missing:
        body["missing"] = [{"name": k, "error": v} for k, v in sorted(missing.items())]
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(body, f, sort_keys=False, allow_unicode=True, width=1000)

    sidecar = path.with_name(path.stem + ".provenance.yaml")
    with open(sidecar, "w", encoding="utf-8") as f:
        yaml.safe_dump(
            {"provenance": [{"name": d.name, "backend": d.backend_id, "created_at": d.created_at} for d in ordered]},
            f, sort_keys=False, width=1000,
        )
    return path, sidecar


# Backends

class LlmBackend:
    """Interface: a backend id and a query(text) -> text call."""

    backend_id = "abstract"

    def query(self, text: str) -> str:
        raise NotImplementedError


class StubBackend(LlmBackend):
    """Answers from a fixed name -> description table; deterministic."""

    def __init__(self, table: Dict[str, str], backend_id: str = "stub"):
        self.table = {k.casefold(): v for k, v in table.items()}
        self.backend_id = backend_id

    @classmethod
    def from_file(cls, path=DEFAULT_DESCRIPTIONS) -> "StubBackend":
        table = {d.name: d.description for d in load_descriptions(path).values()}
        return cls(table)

    def query(self, text: str) -> str:
        match = QUERY_NAME_RE.match(text)
        if not match:
            raise BackendError("stub backend only answers definition queries")
        name = match.group(1)
        if name.casefold() not in self.table:
            raise BackendError(f"stub backend has no description for {name}")
        return self.table[name.casefold()]


class HttpBackend(LlmBackend):
    """Chat-completion style endpoint reached over HTTP."""

    def __init__(self, endpoint: str, model: str, api_key: Optional[str] = None,
                 temperature: float = 0.0, timeout: float = 60.0):
        self.endpoint = endpoint
        self.model = model
        self.api_key = api_key
        self.temperature = temperature
        self.timeout = timeout
        self.backend_id = f"http:{model}@t{temperature}"

    def query(self, text: str) -> str:
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        payload = {
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{"role": "user", "content": text}],
        }
        try:
            response = requests.post(self.endpoint, json=payload, headers=headers, timeout=self.timeout)
            response.raise_for_status()
            data = response.json()
            return data["choices"][0]["message"]["content"].strip()
        except requests.exceptions.RequestException as e:
            raise BackendError(f"request to {self.endpoint} failed: {e}")
        except (ValueError, KeyError, IndexError, TypeError) as e:
            raise BackendError(f"malformed response from {self.endpoint}: {e}")


# Prompt construction

def build_llm_query(d: AbnormalityDef, attrs: AttributeSet = AttributeSet()) -> str:
    """Fill the description-request template with a definition and attribute list."""
    definition = d.definition.strip()
    if definition.endswith("."):
        definition = definition[:-1]
    if not definition:
        raise PromptError(f"empty definition for {d.name}")
    template = _templates.get_template("llm_query.j2")
    return template.render(name=d.name, definition=definition, attributes=list(attrs.attributes))


def build_grounding_prompt(name: str, desc: Optional[KnowledgeDescription], mode: str = LABEL_ONLY,
                           label_template: str = DEFAULT_LABEL_TEMPLATE,
                           knowledge_template: str = DEFAULT_KNOWLEDGE_TEMPLATE) -> str:
    if mode == LABEL_ONLY:
        return label_template.format(name=name)
    if mode == KNOWLEDGE:
        if desc is None:
            raise PromptError(f"knowledge mode needs a description for {name}")
        return knowledge_template.format(name=name, description=desc.description.strip())
    raise PromptError(f"unknown prompt mode {mode!r}")


def _query_with_retries(backend: LlmBackend, query: str, max_retries: int, backoff: float) -> str:
    last_error = None
    for attempt in range(max_retries + 1):
        try:
            answer = backend.query(query)
            if not answer or not answer.strip():
                raise BackendError("empty response")
            return answer.strip()
        except BackendError as e:
            last_error = e
            if attempt < max_retries:
                delay = backoff * (2 ** attempt)
                logger.warning("Backend %s failed (%s); retry %d/%d in %.2fs",
                               backend.backend_id, e, attempt + 1, max_retries, delay)
                time.sleep(delay)
    raise BackendError(str(last_error))


def generate_descriptions(registry: Iterable[AbnormalityDef], attrs: AttributeSet, backend: LlmBackend,
                          cache: Optional[ResponseCache] = None, max_retries: int = 3,
                          backoff: float = 0.5, concurrency: int = 4) -> GenerationResult:
    """One description per definition; cached responses skip the backend entirely."""
    definitions = sorted(registry, key=lambda d: d.name.casefold())
    result = GenerationResult()

    def describe(d: AbnormalityDef):
        query = build_llm_query(d, attrs)
        if cache is not None:
            hit = cache.get(backend.backend_id, query)
            if hit is not None:
                return d, hit.response, hit.created_at.isoformat(), None, False
        try:
            answer = _query_with_retries(backend, query, max_retries, backoff)
        except BackendError as e:
            return d, None, None, str(e), True
        created_at = datetime.now(timezone.utc).replace(tzinfo=None, microsecond=0).isoformat()
        if cache is not None:
            created_at = cache.put(backend.backend_id, query, answer).created_at.isoformat()
        return d, answer, created_at, None, True

    if concurrency > 1 and len(definitions) > 1:
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            outcomes = list(pool.map(describe, definitions))
    else:
        outcomes = [describe(d) for d in definitions]

    for d, answer, created_at, error, called in outcomes:
        result.backend_calls += int(called)
        if answer is None:
            result.missing[d.name] = error
            continue
        result.descriptions.append(KnowledgeDescription(d.name, answer, backend.backend_id, created_at))

    if result.missing:
        logger.warning("No description for %d abnormalities: %s",
                       len(result.missing), ", ".join(sorted(result.missing)))
    return result
