"""The toy prompt language: parsing, canonical form, first-frame reduction,
seeded rephrasing, and tokenization.

Grammar:

    prompt  := obj (";" obj)*
    obj     := ["a"|"the"] color shape "at" position [motion ("then" motion)*]
    motion  := "moves" dir | "turns" color | "grows" | "shrinks"
    color   := "red" | "green" | "blue" | "yellow"
    shape   := "square" | "circle" | "triangle"
    dir     := "left" | "right" | "up" | "down"
    position:= row col | "center"            (row in top/middle/bottom,
                                               col in left/center/right)

Hyphens and whitespace both separate words, so "top-left" and "top left"
parse identically. Keywords are case-insensitive. The canonical form is
lowercase, article-free, with hyphenated positions ("center" abbreviates
middle-center).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from anchorflow.errors import LengthError, PromptSemanticError, PromptSyntaxError
from anchorflow.rng import stream

COLORS = ("red", "green", "blue", "yellow")
SHAPES = ("square", "circle", "triangle")
ROWS = ("top", "middle", "bottom")
COLS = ("left", "center", "right")
DIRECTIONS = ("left", "right", "up", "down")
ARTICLES = ("a", "the")

MOVE, TURN, GROW, SHRINK = "move", "turn", "grow", "shrink"

MAX_OBJECTS = 3
MAX_MOTIONS = 2
TEXT_LEN = 32

# Fixed closed vocabulary: PAD, SEP, then every terminal word in sorted order.
PAD_ID = 0
SEP_ID = 1
_WORDS = sorted(
    set(COLORS) | set(SHAPES) | set(ROWS) | set(COLS) | set(DIRECTIONS)
    | set(ARTICLES) | {"at", "moves", "turns", "grows", "shrinks", "then"}
)
VOCAB = {w: i + 2 for i, w in enumerate(_WORDS)}
VOCAB_SIZE = len(VOCAB) + 2
ID_TO_WORD = {i: w for w, i in VOCAB.items()}


@dataclass(frozen=True)
class Motion:
    kind: str
    arg: str | None = None

    def __post_init__(self):
        if self.kind == MOVE and self.arg not in DIRECTIONS:
            raise PromptSemanticError(f"bad move direction {self.arg!r}")
        if self.kind == TURN and self.arg not in COLORS:
            raise PromptSemanticError(f"bad turn color {self.arg!r}")
        if self.kind in (GROW, SHRINK) and self.arg is not None:
            raise PromptSemanticError(f"{self.kind} takes no argument")


@dataclass(frozen=True)
class ObjectClause:
    color: str
    shape: str
    row: str
    col: str
    motions: tuple[Motion, ...] = ()

    def __post_init__(self):
        if self.color not in COLORS or self.shape not in SHAPES:
            raise PromptSemanticError(f"bad color/shape {self.color!r} {self.shape!r}")
        if self.row not in ROWS or self.col not in COLS:
            raise PromptSemanticError(f"bad position {self.row!r} {self.col!r}")
        if len(self.motions) > MAX_MOTIONS:
            raise PromptSemanticError("at most two motions per object")
        for m in self.motions:
            if m.kind == TURN and m.arg == self.color:
                raise PromptSemanticError(f"turn target equals object color {self.color!r}")

    @property
    def position(self) -> tuple[str, str]:
        return (self.row, self.col)


@dataclass(frozen=True)
class PromptAst:
    objects: tuple[ObjectClause, ...]

    def __post_init__(self):
        if not 1 <= len(self.objects) <= MAX_OBJECTS:
            raise PromptSemanticError(f"need 1..{MAX_OBJECTS} objects, got {len(self.objects)}")
        positions = [o.position for o in self.objects]
        if len(set(positions)) != len(positions):
            raise PromptSemanticError("duplicate object positions")


@dataclass
class TokenSequence:
    ids: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.mask = np.asarray(self.mask, dtype=np.int64)

    def __eq__(self, other):
        return isinstance(other, TokenSequence) and \
            np.array_equal(self.ids, other.ids) and np.array_equal(self.mask, other.mask)


# ---------------------------------------------------------------- lexing

def _lex(text: str) -> list[tuple[str, int]]:
    """Split into (token, byte_offset) pairs; ';' is its own token."""
    raw = text.encode("utf-8")
    tokens = []
    i = 0
    while i < len(raw):
        b = raw[i]
        if b in b" \t\r\n-":
            i += 1
        elif b == ord(";"):
            tokens.append((";", i))
            i += 1
        elif (65 <= b <= 90) or (97 <= b <= 122):
            j = i
            while j < len(raw) and ((65 <= raw[j] <= 90) or (97 <= raw[j] <= 122)):
                j += 1
            tokens.append((raw[i:j].decode("utf-8").lower(), i))
            i = j
        else:
            raise PromptSyntaxError(f"unexpected byte {raw[i:i + 1]!r}", i, {"word", ";"})
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _lex(text)
        self.pos = 0
        self.end_offset = len(text.encode("utf-8"))

    def peek(self) -> str | None:
        return self.tokens[self.pos][0] if self.pos < len(self.tokens) else None

    def offset(self) -> int:
        return self.tokens[self.pos][1] if self.pos < len(self.tokens) else self.end_offset

    def take(self, *expected: str) -> str:
        tok = self.peek()
        if tok is None or (expected and tok not in expected):
            raise PromptSyntaxError(
                f"unexpected {'end of input' if tok is None else tok!r}",
                self.offset(), set(expected))
        self.pos += 1
        return tok

    def parse_prompt(self) -> PromptAst:
        objects = [self.parse_object()]
        while self.peek() == ";":
            self.take(";")
            objects.append(self.parse_object())
        if self.peek() is not None:
            raise PromptSyntaxError(f"trailing input {self.peek()!r}", self.offset(), {";"})
        return PromptAst(tuple(objects))

    def parse_object(self) -> ObjectClause:
        if self.peek() in ARTICLES:
            self.take(*ARTICLES)
        color = self.take(*COLORS)
        shape = self.take(*SHAPES)
        self.take("at")
        row, col = self.parse_position()
        motions = []
        if self.peek() in ("moves", "turns", "grows", "shrinks"):
            motions.append(self.parse_motion())
            while self.peek() == "then":
                self.take("then")
                motions.append(self.parse_motion())
        return ObjectClause(color, shape, row, col, tuple(motions))

    def parse_position(self) -> tuple[str, str]:
        tok = self.take(*(ROWS + ("center",)))
        if tok == "center":
            return ("middle", "center")
        col = self.take(*COLS)
        return (tok, col)

    def parse_motion(self) -> Motion:
        kind = self.take("moves", "turns", "grows", "shrinks")
        if kind == "moves":
            return Motion(MOVE, self.take(*DIRECTIONS))
        if kind == "turns":
            return Motion(TURN, self.take(*COLORS))
        return Motion(GROW if kind == "grows" else SHRINK)


def parse_prompt(text: str) -> PromptAst:
    """Parse a prompt; PromptSyntaxError carries offset and expected tokens,
    PromptSemanticError flags duplicate positions / self-colored turns."""
    return _Parser(text).parse_prompt()


# ------------------------------------------------------------- canonical

def _position_str(row: str, col: str) -> str:
    if (row, col) == ("middle", "center"):
        return "center"
    return f"{row}-{col}"


def _motion_str(m: Motion) -> str:
    if m.kind == MOVE:
        return f"moves {m.arg}"
    if m.kind == TURN:
        return f"turns {m.arg}"
    return "grows" if m.kind == GROW else "shrinks"


def serialize_prompt(ast: PromptAst) -> str:
    """Canonical lowercase article-free form; parse(serialize(a)) == a."""
    parts = []
    for o in ast.objects:
        s = f"{o.color} {o.shape} at {_position_str(o.row, o.col)}"
        if o.motions:
            s += " " + " then ".join(_motion_str(m) for m in o.motions)
        parts.append(s)
    return "; ".join(parts)


def reduce_to_first_frame(ast: PromptAst) -> PromptAst:
    """Strip all motions, keeping the pre-transition attributes (a clause that
    turns green keeps its original color)."""
    return PromptAst(tuple(
        ObjectClause(o.color, o.shape, o.row, o.col, ()) for o in ast.objects))


def rephrase(ast: PromptAst, seed: int) -> str:
    """Semantics-preserving surface variant: seeded clause permutation plus
    independent article choice per clause. If articles would overflow the
    token cap the variant falls back to the article-free wording."""
    rng = stream("rephrase", seed)
    order = rng.permutation(len(ast.objects))
    articles = [("", "a ", "the ")[rng.integers(3)] for _ in ast.objects]
    parts = []
    for art, idx in zip(articles, order):
        o = ast.objects[idx]
        s = f"{art}{o.color} {o.shape} at {_position_str(o.row, o.col)}"
        if o.motions:
            s += " " + " then ".join(_motion_str(m) for m in o.motions)
        parts.append(s)
    text = "; ".join(parts)
    if _count_tokens(text) > TEXT_LEN:
        text = "; ".join(p.removeprefix("a ").removeprefix("the ") for p in parts)
    return text


# ------------------------------------------------------------- tokenizer

def _words_of(text: str) -> list[str]:
    return [tok for tok, _ in _lex(text)]


def _count_tokens(text: str) -> int:
    return len(_words_of(text))


def tokenize(text: str) -> TokenSequence:
    """Deterministic ids over the fixed vocabulary, clause breaks as SEP,
    padded to TEXT_LEN. The empty string is the unconditional input and maps
    to the all-PAD sequence."""
    words = _words_of(text)
    ids = []
    for w in words:
        if w == ";":
            ids.append(SEP_ID)
        elif w in VOCAB:
            ids.append(VOCAB[w])
        else:
            raise PromptSyntaxError(f"word {w!r} not in vocabulary", 0, set(VOCAB))
    if len(ids) > TEXT_LEN:
        raise LengthError(f"{len(ids)} tokens exceed the cap of {TEXT_LEN}")
    n = len(ids)
    out_ids = np.full(TEXT_LEN, PAD_ID, dtype=np.int64)
    out_ids[:n] = ids
    mask = np.zeros(TEXT_LEN, dtype=np.int64)
    mask[:n] = 1
    return TokenSequence(out_ids, mask)


def pad_tokens() -> TokenSequence:
    """The unconditional (all-PAD) token sequence."""
    return tokenize("")


def prompt_hash_bucket(text: str, buckets: int = 16) -> int:
    """Stable bucket of the prompt string, used for the train/eval split."""
    digest = hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % buckets


def read_prompt_file(path) -> list[str]:
    """One prompt per line; '#' lines are comments; blanks skipped."""
    lines = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                lines.append(line)
    return lines


# --------------------------------------------------------------- sampling

def sample_prompt(rng: np.random.Generator) -> PromptAst:
    """Uniform draw from the grammar: 1-3 objects on distinct cells, 0-2
    motions each. Geometry feasibility is the caller's concern."""
    n_obj = int(rng.integers(1, MAX_OBJECTS + 1))
    cells = [(r, c) for r in ROWS for c in COLS]
    cell_idx = rng.choice(len(cells), size=n_obj, replace=False)
    objects = []
    for k in range(n_obj):
        color = COLORS[rng.integers(len(COLORS))]
        shape = SHAPES[rng.integers(len(SHAPES))]
        row, col = cells[cell_idx[k]]
        n_mot = int(rng.integers(0, MAX_MOTIONS + 1))
        motions = tuple(_sample_motion(rng, color) for _ in range(n_mot))
        objects.append(ObjectClause(color, shape, row, col, motions))
    return PromptAst(tuple(objects))


def _sample_motion(rng: np.random.Generator, color: str) -> Motion:
    turn_targets = [c for c in COLORS if c != color]
    options = [Motion(MOVE, d) for d in DIRECTIONS] + \
        [Motion(TURN, c) for c in turn_targets] + [Motion(GROW), Motion(SHRINK)]
    return options[rng.integers(len(options))]
