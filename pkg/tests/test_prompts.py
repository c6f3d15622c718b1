import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anchorflow.errors import LengthError, PromptSemanticError, PromptSyntaxError
from anchorflow.prompts import (
    COLORS, DIRECTIONS, PAD_ID, SEP_ID, TEXT_LEN, VOCAB, VOCAB_SIZE, Motion,
    ObjectClause, PromptAst, pad_tokens, parse_prompt, reduce_to_first_frame,
    rephrase, sample_prompt, serialize_prompt, tokenize,
)
from anchorflow.rng import stream


def test_parse_single_object_with_move():
    ast = parse_prompt("red square at top-left moves right")
    assert ast == PromptAst((ObjectClause("red", "square", "top", "left",
                                          (Motion("move", "right"),)),))


def test_parse_two_objects_second_empty_motions():
    ast = parse_prompt("blue circle at center turns green; a yellow triangle at bottom-right")
    assert len(ast.objects) == 2
    assert ast.objects[0].motions == (Motion("turn", "green"),)
    assert ast.objects[1] == ObjectClause("yellow", "triangle", "bottom", "right", ())


def test_parse_error_carries_offset_and_expected():
    with pytest.raises(PromptSyntaxError) as exc:
        parse_prompt("red square at top-left moves nowhere")
    assert exc.value.offset == len(b"red square at top-left moves ")
    assert exc.value.expected == frozenset(DIRECTIONS)


def test_parse_is_case_and_whitespace_insensitive():
    a = parse_prompt("RED   Square AT top - LEFT")
    b = parse_prompt("red square at top-left")
    assert a == b


def test_duplicate_positions_rejected():
    with pytest.raises(PromptSemanticError):
        parse_prompt("red square at center; blue circle at center")


def test_turn_to_same_color_rejected():
    with pytest.raises(PromptSemanticError):
        parse_prompt("red square at center turns red")


def test_three_motions_rejected():
    with pytest.raises(PromptSemanticError):
        parse_prompt("red square at center grows then shrinks then grows")


def test_four_objects_rejected():
    text = "; ".join(f"red square at {p}" for p in
                     ["top-left", "top-center", "top-right", "center"])
    with pytest.raises(PromptSemanticError):
        parse_prompt(text)


def test_serialize_canonical_form():
    ast = PromptAst((ObjectClause("red", "square", "top", "left", ()),))
    assert serialize_prompt(ast) == "red square at top-left"


def test_serialize_turn_appears_once():
    ast = parse_prompt("blue circle at center turns green")
    assert serialize_prompt(ast).count("turns green") == 1


def test_roundtrip_1000_random_asts():
    rng = stream("test-roundtrip")
    for _ in range(1000):
        ast = sample_prompt(rng)
        assert parse_prompt(serialize_prompt(ast)) == ast


@st.composite
def ast_strategy(draw):
    seed = draw(st.integers(0, 2 ** 31))
    return sample_prompt(stream("hyp-ast", seed))


@given(ast_strategy())
@settings(max_examples=60, deadline=None)
def test_roundtrip_property(ast):
    assert parse_prompt(serialize_prompt(ast)) == ast


def test_reduce_strips_motions_and_keeps_initial_color():
    ast = parse_prompt("blue circle at center turns green")
    red = reduce_to_first_frame(ast)
    assert serialize_prompt(red) == "blue circle at center"
    assert red.objects[0].color == "blue"


def test_reduce_move_example():
    ast = parse_prompt("red square at top-left moves right")
    assert serialize_prompt(reduce_to_first_frame(ast)) == "red square at top-left"


def test_reduce_idempotent_and_complete():
    rng = stream("test-reduce")
    banned = {"moves", "turns", "grows", "shrinks", "then"}
    for _ in range(200):
        ast = sample_prompt(rng)
        red = reduce_to_first_frame(ast)
        assert reduce_to_first_frame(red) == red
        assert not banned & set(serialize_prompt(red).split())
        assert [(o.color, o.shape, o.row, o.col) for o in red.objects] == \
            [(o.color, o.shape, o.row, o.col) for o in ast.objects]


def _clause_multiset(ast):
    return sorted((o.color, o.shape, o.row, o.col, o.motions) for o in ast.objects)


def test_rephrase_preserves_clause_multiset():
    rng = stream("test-rephrase")
    for _ in range(100):
        ast = sample_prompt(rng)
        for seed in range(5):
            assert _clause_multiset(parse_prompt(rephrase(ast, seed))) == _clause_multiset(ast)


def test_rephrase_two_objects_changes_order():
    ast = parse_prompt("red square at top-left; blue circle at center")
    texts = {rephrase(ast, s) for s in range(20)}
    orders = {tuple(o.color for o in parse_prompt(t).objects) for t in texts}
    assert len(orders) == 2  # both clause orders appear over 20 seeds


def test_rephrase_single_object_at_most_three_forms():
    ast = parse_prompt("red square at top-left")
    assert len({rephrase(ast, s) for s in range(200)}) <= 3


def test_rephrase_three_objects_at_least_four_distinct():
    ast = parse_prompt("red square at top-left; blue circle at center; "
                       "green triangle at bottom-right")
    assert len({rephrase(ast, s) for s in range(25)}) >= 4


def test_rephrase_never_exceeds_token_cap():
    # worst case: 3 objects x 2 motions is exactly 32 canonical tokens
    text = ("red square at top-left moves right then moves down; "
            "blue circle at middle-center moves down then turns green; "
            "green triangle at bottom-right shrinks then turns red")
    ast = parse_prompt(text)
    for s in range(50):
        assert tokenize(rephrase(ast, s)).mask.sum() <= TEXT_LEN


def test_tokenize_empty_is_all_pad():
    t = tokenize("")
    assert (t.ids == PAD_ID).all() and t.mask.sum() == 0
    assert t == pad_tokens()


def test_tokenize_one_id_per_word():
    t = tokenize("red square at top-left")
    assert t.mask.sum() == 5
    assert (t.ids[5:] == PAD_ID).all()


def test_tokenize_sep_marks_clause_boundary():
    t = tokenize("red square at center; blue circle at top-left")
    assert SEP_ID in t.ids[: t.mask.sum()]


def test_tokenize_deterministic_across_runs():
    text = serialize_prompt(parse_prompt("red square at top-left moves right"))
    a, b = tokenize(text), tokenize(text)
    assert a.ids.tobytes() == b.ids.tobytes() and a.mask.tobytes() == b.mask.tobytes()


def test_tokenize_rejects_overlong():
    with pytest.raises(LengthError):
        tokenize("red " * 33)


def test_tokenizer_injective_on_canonical_forms():
    rng = stream("test-injective")
    seen = {}
    for _ in range(500):
        text = serialize_prompt(sample_prompt(rng))
        key = tokenize(text).ids.tobytes()
        assert seen.setdefault(key, text) == text


def test_vocab_ids_in_range():
    assert all(0 <= i < VOCAB_SIZE for i in VOCAB.values())
    assert VOCAB_SIZE <= 32
