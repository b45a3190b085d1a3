"""Prompt template validation, enumeration, sampling, and rendering."""

from __future__ import annotations

import itertools
import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dtgen import prompt_grammar as pg


def small_template(**overrides) -> pg.PromptTemplate:
    """A compact 2x3x2 template with a tagged dirtiness slot."""
    spec = {
        "version": "test-v1",
        "render_pattern": "a photo of {KIND}, with {STATE}, on {SCENE}",
        "slots": [
            {"name": "KIND", "options": [{"text": "bowl"}, {"text": "plate"}]},
            {
                "name": "STATE",
                "options": [
                    {"text": "no dirt", "severity": "clean"},
                    {
                        "text": "a few crumbs",
                        "severity": "light",
                        "dirt_type": "food_residue",
                        "distribution": "local",
                    },
                    {
                        "text": "thick grime",
                        "severity": "heavy",
                        "dirt_type": "grease",
                        "distribution": "full_coverage",
                    },
                ],
            },
            {"name": "SCENE", "options": [{"text": "dark wood"}, {"text": "white marble"}]},
        ],
    }
    spec.update(overrides)
    return pg.template_from_dict(spec)


# --- template validation -------------------------------------------------


def test_default_template_shape():
    t = pg.default_template()
    assert t.cardinalities == (6, 28, 132, 16)
    assert t.space_size == 6 * 28 * 132 * 16 == 354_816


def test_default_template_severity_split():
    t = pg.default_template()
    slot = t.slots[t.severity_slot_index()]
    by_sev = {"clean": 0, "light": 0, "heavy": 0}
    for opt in slot.options:
        by_sev[opt.severity] += 1
    assert by_sev == {"clean": 24, "light": 54, "heavy": 54}
    for opt in slot.options:
        if opt.severity == "clean":
            assert opt.dirt_type is None and opt.distribution is None
        else:
            assert opt.dirt_type
            assert opt.distribution in pg.DISTRIBUTIONS


def test_pattern_must_reference_every_slot():
    with pytest.raises(pg.TemplateError, match="SCENE"):
        small_template(render_pattern="a photo of {KIND}, with {STATE}")


def test_pattern_rejects_unknown_placeholder():
    with pytest.raises(pg.TemplateError, match="GHOST"):
        small_template(render_pattern="a photo of {KIND}, with {STATE}, on {SCENE} and {GHOST}")


def test_pattern_rejects_repeated_slot():
    with pytest.raises(pg.TemplateError, match="KIND"):
        small_template(render_pattern="{KIND} {KIND} {STATE} {SCENE}")


def test_duplicate_option_text_rejected():
    spec_slots = [
        {"name": "KIND", "options": [{"text": "bowl"}, {"text": "bowl"}]},
        {
            "name": "STATE",
            "options": [{"text": "no dirt", "severity": "clean"}],
        },
        {"name": "SCENE", "options": [{"text": "dark wood"}]},
    ]
    with pytest.raises(pg.TemplateError, match="duplicate"):
        small_template(slots=spec_slots)


def test_empty_option_text_rejected():
    slots = [
        {"name": "KIND", "options": [{"text": ""}]},
        {"name": "STATE", "options": [{"text": "no dirt", "severity": "clean"}]},
        {"name": "SCENE", "options": [{"text": "dark wood"}]},
    ]
    with pytest.raises(pg.TemplateError):
        small_template(slots=slots)


def test_partial_severity_tagging_rejected():
    slots = [
        {"name": "KIND", "options": [{"text": "bowl"}]},
        {
            "name": "STATE",
            "options": [
                {"text": "no dirt", "severity": "clean"},
                {"text": "dusty"},
            ],
        },
        {"name": "SCENE", "options": [{"text": "dark wood"}]},
    ]
    with pytest.raises(pg.TemplateError, match="severity"):
        small_template(slots=slots)


def test_dirty_option_requires_dirt_attributes():
    slots = [
        {"name": "KIND", "options": [{"text": "bowl"}]},
        {
            "name": "STATE",
            "options": [
                {"text": "no dirt", "severity": "clean"},
                {"text": "dusty", "severity": "light"},
            ],
        },
        {"name": "SCENE", "options": [{"text": "dark wood"}]},
    ]
    with pytest.raises(pg.TemplateError, match="dirt_type"):
        small_template(slots=slots)


def test_unknown_severity_rejected():
    slots = [
        {"name": "KIND", "options": [{"text": "bowl"}]},
        {
            "name": "STATE",
            "options": [{"text": "no dirt", "severity": "spotless"}],
        },
        {"name": "SCENE", "options": [{"text": "dark wood"}]},
    ]
    with pytest.raises(pg.TemplateError, match="severity"):
        small_template(slots=slots)


def test_two_severity_slots_rejected():
    slots = [
        {"name": "KIND", "options": [{"text": "spotless bowl", "severity": "clean"}]},
        {"name": "STATE", "options": [{"text": "no dirt", "severity": "clean"}]},
        {"name": "SCENE", "options": [{"text": "dark wood"}]},
    ]
    with pytest.raises(pg.TemplateError, match="severity"):
        small_template(slots=slots)


def test_cross_slot_containment_rejected():
    # "bowl" appears inside "bowl of fruit" from another slot, which would
    # make rendered strings ambiguous to parse back.
    slots = [
        {"name": "KIND", "options": [{"text": "bowl"}]},
        {"name": "STATE", "options": [{"text": "no dirt", "severity": "clean"}]},
        {"name": "SCENE", "options": [{"text": "a bowl of fruit"}]},
    ]
    with pytest.raises(pg.TemplateError, match="contain"):
        small_template(slots=slots)


def test_option_text_with_braces_rejected():
    slots = [
        {"name": "KIND", "options": [{"text": "bowl {x}"}]},
        {"name": "STATE", "options": [{"text": "no dirt", "severity": "clean"}]},
        {"name": "SCENE", "options": [{"text": "dark wood"}]},
    ]
    with pytest.raises(pg.TemplateError):
        small_template(slots=slots)


def test_load_template_rejects_missing_keys(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"version": "x"}))
    with pytest.raises(pg.TemplateError):
        pg.load_template(path)


# --- taxonomy -------------------------------------------------------------


def test_three_class_taxonomy_mapping():
    tax = pg.three_class_taxonomy()
    assert tax.label_for("clean") == 0
    assert tax.label_for("light") == 1
    assert tax.label_for("heavy") == 2
    assert tax.class_names == ("clean", "lightly_dirty", "heavily_dirty")


def test_binary_taxonomy_collapses_severities():
    tax = pg.binary_taxonomy()
    assert tax.label_for("clean") == 0
    assert tax.label_for("light") == 1
    assert tax.label_for("heavy") == 1
    assert tax.class_names == ("clean", "dirty")


def test_taxonomy_rejects_gap_in_class_indices():
    with pytest.raises(pg.TemplateError):
        pg.LabelTaxonomy(
            name="gappy",
            severities=pg.SEVERITIES,
            class_names=("clean", "x", "dirty"),
            class_map={"clean": 0, "light": 2, "heavy": 2},
        )


def test_taxonomy_rejects_missing_severity():
    with pytest.raises(pg.TemplateError):
        pg.LabelTaxonomy(
            name="partial",
            severities=pg.SEVERITIES,
            class_names=("clean",),
            class_map={"clean": 0},
        )


# --- rendering ------------------------------------------------------------


def test_render_fills_every_placeholder():
    t = small_template()
    p = t and pg.render(t, {"KIND": 0, "STATE": 1, "SCENE": 1})
    assert p.text == "a photo of bowl, with a few crumbs, on white marble"
    assert "{" not in p.text and "}" not in p.text


def test_render_known_composition():
    t = pg.default_template()
    choices = {}
    targets = {
        "TABLEWARE TYPE": "bowl",
        "COLOR OR PATTERN DESCRIPTION": "a round white ceramic dinner",
        "DIRTINESS DESCRIPTION": "a few crumbs scattered in the center",
        "TEXTURED SURFACE AND LIGHTING STYLE": "bright kitchen light",
    }
    for slot in t.slots:
        texts = [o.text for o in slot.options]
        choices[slot.name] = texts.index(targets[slot.name])
    p = pg.render(t, choices, taxonomy=pg.three_class_taxonomy())
    assert p.text == (
        "a photo of bowl, a round white ceramic dinner, with a few crumbs "
        "scattered in the center, on bright kitchen light"
    )
    assert p.derived_label == 1
    assert p.attributes["severity"] == "light"


def test_render_label_tracks_severity_only():
    t = small_template()
    tax = pg.three_class_taxonomy()
    for kind, scene in itertools.product(range(2), range(2)):
        assert pg.render(t, {"KIND": kind, "STATE": 0, "SCENE": scene}, tax).derived_label == 0
        assert pg.render(t, {"KIND": kind, "STATE": 2, "SCENE": scene}, tax).derived_label == 2


def test_render_accepts_index_tuple():
    t = small_template()
    a = pg.render(t, (1, 2, 0))
    b = pg.render(t, {"KIND": 1, "STATE": 2, "SCENE": 0})
    assert a.text == b.text
    assert a.prompt_id == b.prompt_id


def test_render_rejects_out_of_range_choice():
    t = small_template()
    with pytest.raises(pg.RenderError):
        pg.render(t, {"KIND": 5, "STATE": 0, "SCENE": 0})


def test_render_rejects_missing_slot():
    t = small_template()
    with pytest.raises(pg.RenderError):
        pg.render(t, {"KIND": 0, "STATE": 0})


def test_prompt_id_stable_and_distinct():
    t = small_template()
    a = pg.render(t, (0, 1, 1))
    b = pg.render(t, (0, 1, 1))
    c = pg.render(t, (0, 1, 0))
    assert a.prompt_id == b.prompt_id
    assert a.prompt_id != c.prompt_id
    assert len(a.prompt_id) == 16


# --- enumeration ----------------------------------------------------------


def test_enumerate_space_counts_and_uniqueness():
    t = small_template()
    prompts = list(pg.enumerate_space(t))
    assert len(prompts) == 12
    assert len({p.text for p in prompts}) == 12
    assert len({p.prompt_id for p in prompts}) == 12


def test_enumerate_space_is_lexicographic():
    t = small_template()
    indices = [tuple(p.slot_choices[s.name] for s in t.slots) for p in pg.enumerate_space(t)]
    assert indices == sorted(indices)
    assert indices == list(itertools.product(range(2), range(3), range(2)))


def test_enumerate_space_is_lazy():
    t = pg.default_template()
    gen = pg.enumerate_space(t)
    first = next(gen)
    assert first.slot_choices[t.slots[0].name] == 0


# --- sampling -------------------------------------------------------------


def test_sample_uniform_deterministic():
    t = small_template()
    a = pg.sample_uniform(t, 50, seed=123)
    b = pg.sample_uniform(t, 50, seed=123)
    assert [p.text for p in a] == [p.text for p in b]
    assert [p.prompt_id for p in a] == [p.prompt_id for p in b]


def test_sample_uniform_seed_sensitivity():
    t = small_template()
    a = pg.sample_uniform(t, 50, seed=123)
    b = pg.sample_uniform(t, 50, seed=124)
    assert [p.text for p in a] != [p.text for p in b]


def test_sample_uniform_draws_with_replacement():
    t = small_template()  # space of 12, so 100 draws must repeat
    a = pg.sample_uniform(t, 100, seed=5)
    assert len(a) == 100
    assert len({p.prompt_id for p in a}) <= 12


def test_sample_uniform_rejects_nonpositive_n():
    t = small_template()
    with pytest.raises(ValueError):
        pg.sample_uniform(t, 0, seed=1)


def test_sample_uniform_covers_all_options_eventually():
    t = small_template()
    seen = {s.name: set() for s in t.slots}
    for p in pg.sample_uniform(t, 400, seed=11):
        for name, idx in p.slot_choices.items():
            seen[name].add(idx)
    for slot in t.slots:
        assert seen[slot.name] == set(range(slot.cardinality))


# --- properties -----------------------------------------------------------

option_texts = st.lists(
    st.text(alphabet="abcdefghij", min_size=3, max_size=6).map(lambda s: "opt " + s),
    min_size=1,
    max_size=4,
    unique=True,
)


@st.composite
def random_templates(draw):
    n_plain = draw(st.integers(min_value=1, max_value=3))
    slots = []
    for i in range(n_plain):
        texts = draw(option_texts)
        # Prefix with the slot index so no option appears in two slots.
        slots.append(
            {
                "name": f"S{i}",
                "options": [{"text": f"s{i} {t}"} for t in texts],
            }
        )
    pattern = ", ".join("{" + s["name"] + "}" for s in slots)
    return pg.template_from_dict(
        {"version": "prop-v1", "render_pattern": "scene of " + pattern, "slots": slots}
    )


@given(random_templates())
@settings(max_examples=40, deadline=None)
def test_enumeration_size_matches_cardinality_product(template):
    expected = 1
    for c in template.cardinalities:
        expected *= c
    prompts = list(pg.enumerate_space(template))
    assert len(prompts) == expected == template.space_size
    assert len({p.prompt_id for p in prompts}) == expected


@given(random_templates(), st.integers(min_value=1, max_value=30), st.integers(min_value=0, max_value=10**6))
@settings(max_examples=30, deadline=None)
def test_sampled_prompts_always_render_clean(template, n, seed):
    for p in pg.sample_uniform(template, n, seed=seed):
        assert "{" not in p.text and "}" not in p.text
        for slot in template.slots:
            chosen = slot.options[p.slot_choices[slot.name]].text
            assert chosen in p.text


@given(st.integers(min_value=0, max_value=10**6))
@settings(max_examples=20, deadline=None)
def test_sampling_matches_enumeration_universe(seed):
    t = small_template()
    universe = {p.prompt_id: p.text for p in pg.enumerate_space(t)}
    for p in pg.sample_uniform(t, 20, seed=seed):
        assert universe[p.prompt_id] == p.text
