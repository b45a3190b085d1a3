"""Structured prompt grammar: slot templates, enumeration, sampling, labels.

A prompt template is an ordered list of slots, each holding a vocabulary of
text fragments.  Rendering picks one option per slot and substitutes the
fragments into a render pattern.  The Cartesian product of the slot
vocabularies is the prompt space; sampling draws independently and uniformly
per slot, with replacement across prompts.

Exactly one slot may carry severity tags (the dirtiness slot).  The chosen
option's severity, mapped through a :class:`LabelTaxonomy`, yields the class
label of the rendered prompt, so labels are auditable template data rather
than code.

Determinism contract: ``sample_uniform`` is a pure function of
(template version, n, seed), and ``render`` of (template, slot choices).
Randomness is derived by counter-mode hashing (see :mod:`dtgen.seeding`), so
results are stable across platforms and library versions.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterator

from .seeding import hash_uint

logger = logging.getLogger(__name__)

SEVERITIES = ("clean", "light", "heavy")
DISTRIBUTIONS = ("local", "scattered", "full_coverage")

_PLACEHOLDER_RE = re.compile(r"\{([^{}]+)\}")
_ID_PREFIX = "prompt"
_ID_LENGTH = 16


class TemplateError(ValueError):
    """Raised when a template document fails parsing or validation."""


class RenderError(ValueError):
    """Raised when slot choices do not address the template."""


@dataclass(frozen=True)
class SlotOption:
    """One candidate fragment for a slot, with optional taxonomy tags."""

    text: str
    severity: str | None = None
    dirt_type: str | None = None
    distribution: str | None = None
    extended: bool = False

    def attributes(self) -> dict[str, str]:
        tags: dict[str, str] = {}
        if self.severity is not None:
            tags["severity"] = self.severity
        if self.dirt_type is not None:
            tags["dirt_type"] = self.dirt_type
        if self.distribution is not None:
            tags["distribution"] = self.distribution
        return tags

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> SlotOption:
        return cls(
            text=raw.get("text", ""),
            severity=raw.get("severity"),
            dirt_type=raw.get("dirt_type"),
            distribution=raw.get("distribution"),
            extended=bool(raw.get("extended", False)),
        )

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"text": self.text}
        out.update(self.attributes())
        if self.extended:
            out["extended"] = True
        return out


@dataclass(frozen=True)
class SlotVocabulary:
    """A named slot and its ordered candidate fragments."""

    name: str
    options: tuple[SlotOption, ...]

    @property
    def cardinality(self) -> int:
        return len(self.options)

    def has_severity_tags(self) -> bool:
        return any(opt.severity is not None for opt in self.options)

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> SlotVocabulary:
        options = tuple(SlotOption.from_dict(o) for o in raw.get("options", []))
        return cls(name=raw.get("name", ""), options=options)

    def to_dict(self) -> dict[str, Any]:
        return {"name": self.name, "options": [o.to_dict() for o in self.options]}


@dataclass(frozen=True)
class LabelTaxonomy:
    """Maps dirtiness severities onto contiguous task class indices.

    ``class_map`` must cover every severity and hit every class index from 0
    to ``len(class_names) - 1`` (total and surjective).  Dirt types and
    spatial distributions are carried as open attribute sets; they inform
    prompts, not labels.
    """

    name: str
    severities: tuple[str, ...]
    class_names: tuple[str, ...]
    class_map: dict[str, int]
    dirt_types: frozenset[str] = frozenset()
    distributions: frozenset[str] = frozenset(DISTRIBUTIONS)

    def __post_init__(self) -> None:
        missing = [s for s in self.severities if s not in self.class_map]
        if missing:
            raise TemplateError(f"class_map missing severities: {missing}")
        indices = set(self.class_map[s] for s in self.severities)
        expected = set(range(len(self.class_names)))
        if indices != expected:
            raise TemplateError(
                f"class_map must cover classes {sorted(expected)} exactly, got {sorted(indices)}"
            )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def label_for(self, severity: str) -> int:
        if severity not in self.class_map:
            raise TemplateError(f"unknown severity tag: {severity!r}")
        return self.class_map[severity]


def three_class_taxonomy() -> LabelTaxonomy:
    """clean / lightly dirty / heavily dirty, indexed 0..2."""
    return LabelTaxonomy(
        name="three_class",
        severities=SEVERITIES,
        class_names=("clean", "lightly_dirty", "heavily_dirty"),
        class_map={"clean": 0, "light": 1, "heavy": 2},
    )


def binary_taxonomy() -> LabelTaxonomy:
    """clean vs dirty; both dirt severities collapse to the dirty class."""
    return LabelTaxonomy(
        name="binary",
        severities=SEVERITIES,
        class_names=("clean", "dirty"),
        class_map={"clean": 0, "light": 1, "heavy": 1},
    )


@dataclass(frozen=True)
class RenderedPrompt:
    """One fully substituted prompt with its provenance and derived label."""

    prompt_id: str
    text: str
    slot_choices: dict[str, int]
    derived_label: int | None
    attributes: dict[str, str] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_id": self.prompt_id,
            "text": self.text,
            "slot_choices": dict(self.slot_choices),
            "derived_label": self.derived_label,
            "attributes": dict(self.attributes),
        }


@dataclass(frozen=True)
class PromptTemplate:
    """A validated slot template plus its render pattern."""

    version: str
    render_pattern: str
    slots: tuple[SlotVocabulary, ...]

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(s.cardinality for s in self.slots)

    @property
    def space_size(self) -> int:
        size = 1
        for card in self.cardinalities:
            size *= card
        return size

    @property
    def slot_names(self) -> tuple[str, ...]:
        return tuple(s.name for s in self.slots)

    def severity_slot_index(self) -> int | None:
        for i, slot in enumerate(self.slots):
            if slot.has_severity_tags():
                return i
        return None

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": self.version,
            "render_pattern": self.render_pattern,
            "slots": [s.to_dict() for s in self.slots],
        }


def _validate(template: PromptTemplate) -> PromptTemplate:
    if not template.version or not isinstance(template.version, str):
        raise TemplateError("template version must be a non-empty string")
    if not template.slots:
        raise TemplateError("template must define at least one slot")

    names = [s.name for s in template.slots]
    for name in names:
        if not name or not name.strip():
            raise TemplateError("slot names must be non-empty")
    dup_names = {n for n in names if names.count(n) > 1}
    if dup_names:
        raise TemplateError(f"duplicate slot names: {sorted(dup_names)}")

    referenced = _PLACEHOLDER_RE.findall(template.render_pattern)
    for name in names:
        count = referenced.count(name)
        if count == 0:
            raise TemplateError(f"render_pattern does not reference slot {name!r}")
        if count > 1:
            raise TemplateError(f"render_pattern references slot {name!r} {count} times")
    unknown = [r for r in referenced if r not in names]
    if unknown:
        raise TemplateError(f"render_pattern references unknown slots: {unknown}")

    severity_slots = []
    for slot in template.slots:
        if not slot.options:
            raise TemplateError(f"slot {slot.name!r} has no options")
        texts = [o.text for o in slot.options]
        for text in texts:
            if not text or not text.strip():
                raise TemplateError(f"slot {slot.name!r} contains an empty option")
            if "{" in text or "}" in text:
                raise TemplateError(
                    f"slot {slot.name!r} option {text!r} contains brace characters"
                )
        dups = {t for t in texts if texts.count(t) > 1}
        if dups:
            raise TemplateError(f"slot {slot.name!r} has duplicate options: {sorted(dups)}")

        tagged = [o for o in slot.options if o.severity is not None]
        if tagged:
            severity_slots.append(slot.name)
            for opt in slot.options:
                if opt.severity is None:
                    raise TemplateError(
                        f"slot {slot.name!r} option {opt.text!r} is missing a severity tag"
                    )
                if opt.severity not in SEVERITIES:
                    raise TemplateError(
                        f"slot {slot.name!r} option {opt.text!r} has unknown severity "
                        f"{opt.severity!r} (expected one of {SEVERITIES})"
                    )
                if opt.severity != "clean":
                    if not opt.dirt_type:
                        raise TemplateError(
                            f"slot {slot.name!r} option {opt.text!r} is missing dirt_type"
                        )
                    if opt.distribution not in DISTRIBUTIONS:
                        raise TemplateError(
                            f"slot {slot.name!r} option {opt.text!r} has distribution "
                            f"{opt.distribution!r} (expected one of {DISTRIBUTIONS})"
                        )
    if len(severity_slots) > 1:
        raise TemplateError(f"multiple severity-tagged slots: {severity_slots}")

    # A fragment embedded in another slot's fragment would break the
    # "each chosen fragment appears exactly once" rendering guarantee.
    literal = _PLACEHOLDER_RE.sub("\x00", template.render_pattern)
    all_texts = [(slot.name, o.text) for slot in template.slots for o in slot.options]
    for slot_name, text in all_texts:
        if text in literal:
            raise TemplateError(
                f"slot {slot_name!r} option {text!r} occurs in the render pattern literal"
            )
        for other_name, other_text in all_texts:
            if other_name != slot_name and text in other_text:
                raise TemplateError(
                    f"slot {slot_name!r} option {text!r} is contained in "
                    f"slot {other_name!r} option {other_text!r}"
                )
    return template


def template_from_dict(raw: dict[str, Any]) -> PromptTemplate:
    if not isinstance(raw, dict):
        raise TemplateError("template document must be a JSON object")
    slots = tuple(SlotVocabulary.from_dict(s) for s in raw.get("slots", []))
    template = PromptTemplate(
        version=str(raw.get("version", "")),
        render_pattern=str(raw.get("render_pattern", "")),
        slots=slots,
    )
    return _validate(template)


def load_template(path: str) -> PromptTemplate:
    """Load and validate a template JSON document from ``path``."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise TemplateError(f"cannot parse template {path}: {exc}") from exc
    return template_from_dict(raw)


def default_template() -> PromptTemplate:
    """The shipped four-slot template (cardinalities 6, 28, 132, 16)."""
    raw = json.loads(
        resources.files("dtgen.data").joinpath("default_template.json").read_text("utf-8")
    )
    return template_from_dict(raw)


def _pattern_segments(template: PromptTemplate) -> tuple[list[str], list[int]]:
    """Split the render pattern into literal segments and slot order.

    Returns (segments, slot_order) where the rendered text is
    segments[0] + frag[slot_order[0]] + segments[1] + ... + segments[-1].
    """
    name_to_index = {name: i for i, name in enumerate(template.slot_names)}
    segments: list[str] = []
    order: list[int] = []
    last = 0
    for match in _PLACEHOLDER_RE.finditer(template.render_pattern):
        segments.append(template.render_pattern[last : match.start()])
        order.append(name_to_index[match.group(1)])
        last = match.end()
    segments.append(template.render_pattern[last:])
    return segments, order


def prompt_id_for(version: str, indices: tuple[int, ...]) -> str:
    """Stable 16-hex identifier of (template version, slot choices)."""
    payload = "\x1f".join([_ID_PREFIX, version, *map(str, indices)])
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:_ID_LENGTH]


class _Renderer:
    """Precomputed fast path shared by render, enumeration, and sampling."""

    def __init__(self, template: PromptTemplate, taxonomy: LabelTaxonomy):
        self.template = template
        self.taxonomy = taxonomy
        self.segments, self.order = _pattern_segments(template)
        self.texts = [[o.text for o in s.options] for s in template.slots]
        self.slot_names = template.slot_names
        severity_slot = template.severity_slot_index()
        self.labels: list[int | None] | None = None
        if severity_slot is not None:
            self.severity_slot = severity_slot
            self.labels = [
                taxonomy.label_for(o.severity or "")
                for o in template.slots[severity_slot].options
            ]
        self.attrs = [[o.attributes() for o in s.options] for s in template.slots]

    def render(self, indices: tuple[int, ...]) -> RenderedPrompt:
        parts = [self.segments[0]]
        for pos, slot_idx in enumerate(self.order):
            parts.append(self.texts[slot_idx][indices[slot_idx]])
            parts.append(self.segments[pos + 1])
        text = "".join(parts)

        label: int | None = None
        if self.labels is not None:
            label = self.labels[indices[self.severity_slot]]
        attributes: dict[str, str] = {}
        for slot_idx, opt_idx in enumerate(indices):
            attributes.update(self.attrs[slot_idx][opt_idx])
        return RenderedPrompt(
            prompt_id=prompt_id_for(self.template.version, indices),
            text=text,
            slot_choices={name: indices[i] for i, name in enumerate(self.slot_names)},
            derived_label=label,
            attributes=attributes,
        )


def _normalize_choices(
    template: PromptTemplate, slot_choices: dict[str, int] | tuple[int, ...] | list[int]
) -> tuple[int, ...]:
    if isinstance(slot_choices, dict):
        unknown = [k for k in slot_choices if k not in template.slot_names]
        if unknown:
            raise RenderError(f"unknown slots in choices: {unknown}")
        missing = [n for n in template.slot_names if n not in slot_choices]
        if missing:
            raise RenderError(f"choices missing slots: {missing}")
        indices = tuple(slot_choices[name] for name in template.slot_names)
    else:
        if len(slot_choices) != len(template.slots):
            raise RenderError(
                f"expected {len(template.slots)} choices, got {len(slot_choices)}"
            )
        indices = tuple(slot_choices)
    for slot, idx in zip(template.slots, indices):
        if not isinstance(idx, int) or isinstance(idx, bool):
            raise RenderError(f"slot {slot.name!r} choice must be an integer, got {idx!r}")
        if not 0 <= idx < slot.cardinality:
            raise RenderError(
                f"slot {slot.name!r} index {idx} out of range 0..{slot.cardinality - 1}"
            )
    return indices


def render(
    template: PromptTemplate,
    slot_choices: dict[str, int] | tuple[int, ...] | list[int],
    taxonomy: LabelTaxonomy | None = None,
) -> RenderedPrompt:
    """Render one prompt from explicit slot choices.

    ``slot_choices`` is either a slot_name -> option index map or a tuple of
    indices in slot order.  The label derives from the severity tag of the
    chosen dirtiness option, mapped through ``taxonomy`` (three-class by
    default); templates without a severity slot yield ``derived_label=None``.
    """
    taxonomy = taxonomy or three_class_taxonomy()
    indices = _normalize_choices(template, slot_choices)
    return _Renderer(template, taxonomy).render(indices)


def enumerate_space(
    template: PromptTemplate, taxonomy: LabelTaxonomy | None = None
) -> Iterator[RenderedPrompt]:
    """Yield every prompt of the Cartesian space exactly once.

    Order is lexicographic in option indices with the last slot varying
    fastest.  The sequence is lazy; callers bound consumption.
    """
    taxonomy = taxonomy or three_class_taxonomy()
    renderer = _Renderer(template, taxonomy)
    ranges = [range(s.cardinality) for s in template.slots]
    for indices in itertools.product(*ranges):
        yield renderer.render(indices)


def sample_uniform(
    template: PromptTemplate,
    n: int,
    seed: int,
    taxonomy: LabelTaxonomy | None = None,
) -> list[RenderedPrompt]:
    """Draw ``n`` prompts i.i.d. uniform per slot, with replacement.

    Deterministic given (template version, n, seed): each (draw, slot) pair
    maps to an option index through counter-mode hashing, so the result is
    byte-identical across runs, platforms, and library versions.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    taxonomy = taxonomy or three_class_taxonomy()
    renderer = _Renderer(template, taxonomy)
    cards = template.cardinalities
    version = template.version
    out: list[RenderedPrompt] = []
    for draw in range(n):
        indices = tuple(
            hash_uint(card, "sample", version, seed, draw, slot_idx)
            for slot_idx, card in enumerate(cards)
        )
        out.append(renderer.render(indices))
    return out
