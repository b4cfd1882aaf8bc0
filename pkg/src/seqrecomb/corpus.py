"""Datasets: tokenization, file formats, splits, and the command-language oracle.

Two task families are supported:

* instruction following: lines of ``IN: <command> OUT: <actions>``. Action
  tokens are normalized to canonical single tokens (I_JUMP, I_TURN_LEFT, ...)
  on load; ``display_actions`` renders them back in the two-token style.
  The full command language is finite, so ``generate_corpus`` enumerates it
  and the benchmark splits are built from predicates over commands.

* morphological analysis: UniMorph-style 3-column TSV
  (``lemma \\t inflected \\t tags``), word forms tokenized per character and
  tags kept whole. Spaces inside multi-word forms become the '▁' token so
  the space-separated line format stays unambiguous.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace

import numpy as np

SEP = "▷"
PAD = "<pad>"
BOS = "<s>"
EOS = "</s>"
UNK = "<unk>"
RESERVED = (PAD, BOS, EOS, SEP, UNK)

SPACE_CHAR = "▁"


@dataclass(frozen=True)
class Datum:
    """One example: the (x ▷ y) pair plus task-specific views."""

    x: tuple[str, ...]
    y: tuple[str, ...]
    task: str = "scan"
    lemma: tuple[str, ...] | None = None
    tags: tuple[str, ...] | None = None
    inflection: tuple[str, ...] | None = None
    order: str | None = None  # "analysis" | "reinflection" for morphology

    def __post_init__(self):
        if not self.x or not self.y:
            raise ValueError("datum needs nonempty x and y")

    @property
    def flat(self) -> tuple[str, ...]:
        return self.x + (SEP,) + self.y

    def line(self) -> str:
        return " ".join(self.flat)


class Vocabulary:
    """Frozen token <-> id bijection with reserved ids up front."""

    def __init__(self, tokens):
        self.id_to_token = list(RESERVED)
        seen = set(RESERVED)
        for tok in tokens:
            if tok not in seen:
                seen.add(tok)
                self.id_to_token.append(tok)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        self.pad = self.token_to_id[PAD]
        self.bos = self.token_to_id[BOS]
        self.eos = self.token_to_id[EOS]
        self.sep = self.token_to_id[SEP]
        self.unk = self.token_to_id[UNK]

    @classmethod
    def from_data(cls, data) -> "Vocabulary":
        toks = []
        for d in data:
            toks.extend(d.flat)
        return cls(sorted(set(toks) - set(RESERVED)))

    def __len__(self):
        return len(self.id_to_token)

    def encode(self, tokens) -> list[int]:
        return [self.token_to_id.get(t, self.unk) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]


@dataclass
class Split:
    """Train data plus named test sets; no flat sequence is in both."""

    train: list[Datum]
    tests: dict[str, list[Datum]]
    hints: int = 0
    seed: int = 0

    def check(self):
        train_flats = {d.flat for d in self.train}
        for name, test in self.tests.items():
            for d in test:
                if d.flat in train_flats:
                    raise ValueError(f"test set '{name}' overlaps train: {d.line()}")


# ---------------------------------------------------------------------------
# command language (instruction following)

_PRIMITIVES = ("walk", "look", "run", "jump")
_PRIM_ACTION = {"walk": "I_WALK", "look": "I_LOOK", "run": "I_RUN", "jump": "I_JUMP"}
_TURN_ACTION = {"left": "I_TURN_LEFT", "right": "I_TURN_RIGHT"}

# accepted spellings of action tokens in input files
_ACTION_ALIASES = {
    "I_WALK": "I_WALK", "I_LOOK": "I_LOOK", "I_RUN": "I_RUN", "I_JUMP": "I_JUMP",
    "I_TURN_LEFT": "I_TURN_LEFT", "I_TURN_RIGHT": "I_TURN_RIGHT",
    "WALK": "I_WALK", "LOOK": "I_LOOK", "RUN": "I_RUN", "JUMP": "I_JUMP",
    "LTURN": "I_TURN_LEFT", "RTURN": "I_TURN_RIGHT",
}

_DISPLAY = {
    "I_WALK": "WALK", "I_LOOK": "LOOK", "I_RUN": "RUN", "I_JUMP": "JUMP",
    "I_TURN_LEFT": "TURN LEFT", "I_TURN_RIGHT": "TURN RIGHT",
}


def normalize_actions(tokens) -> list[str]:
    """Map input-file action spellings (I_*, JUMP, RTURN, TURN RIGHT) to
    canonical single tokens. Raises on unknown tokens."""
    out = []
    i = 0
    toks = list(tokens)
    while i < len(toks):
        t = toks[i]
        if t == "TURN" and i + 1 < len(toks) and toks[i + 1] in ("LEFT", "RIGHT"):
            out.append(_TURN_ACTION[toks[i + 1].lower()])
            i += 2
            continue
        if t not in _ACTION_ALIASES:
            raise ValueError(f"unknown action token {t!r}")
        out.append(_ACTION_ALIASES[t])
        i += 1
    return out


def display_actions(tokens) -> str:
    """Render canonical action tokens in the two-token display style."""
    return " ".join(_DISPLAY[t] for t in tokens)


def _interp_v(toks: list[str]) -> list[str] | None:
    """Verb phrase: primitive, turn, and the opposite/around constructions."""
    n = len(toks)
    if n == 1:
        return [_PRIM_ACTION[toks[0]]] if toks[0] in _PRIMITIVES else None
    if n == 2:
        head, direction = toks
        if direction not in _TURN_ACTION:
            return None
        turn = _TURN_ACTION[direction]
        if head == "turn":
            return [turn]
        if head in _PRIMITIVES:
            return [turn, _PRIM_ACTION[head]]
        return None
    if n == 3:
        head, mod, direction = toks
        if direction not in _TURN_ACTION or mod not in ("opposite", "around"):
            return None
        turn = _TURN_ACTION[direction]
        if head == "turn":
            body = [turn]
        elif head in _PRIMITIVES:
            body = [turn, _PRIM_ACTION[head]]
        else:
            return None
        if mod == "opposite":
            return [turn] + body if head != "turn" else body * 2
        return body * 4
    return None


def _interp_s(toks: list[str]) -> list[str] | None:
    if toks and toks[-1] in ("twice", "thrice"):
        reps = 2 if toks[-1] == "twice" else 3
        inner = _interp_v(toks[:-1])
        return None if inner is None else inner * reps
    return _interp_v(toks)


def scan_interpret(command) -> list[str] | None:
    """Deterministic oracle for the command language; None if the command
    is outside the grammar (never raises on bad input)."""
    toks = list(command)
    if not toks or not all(isinstance(t, str) for t in toks):
        return None
    for conn in ("and", "after"):
        if toks.count(conn) > 1:
            return None
    for i, t in enumerate(toks):
        if t in ("and", "after"):
            left = _interp_s(toks[:i])
            right = _interp_s(toks[i + 1:])
            if left is None or right is None:
                return None
            return left + right if t == "and" else right + left
    return _interp_s(toks)


def generate_corpus() -> list[Datum]:
    """Enumerate every command in the grammar, paired with its actions."""
    verbs = []
    for u in _PRIMITIVES:
        verbs.append([u])
    for head in list(_PRIMITIVES) + ["turn"]:
        for direction in ("left", "right"):
            verbs.append([head, direction])
            verbs.append([head, "opposite", direction])
            verbs.append([head, "around", direction])
    sentences = []
    for v in verbs:
        sentences.append(v)
        sentences.append(v + ["twice"])
        sentences.append(v + ["thrice"])
    commands = list(sentences)
    for s1 in sentences:
        for s2 in sentences:
            commands.append(s1 + ["and"] + s2)
            commands.append(s1 + ["after"] + s2)
    data = []
    for cmd in commands:
        actions = scan_interpret(cmd)
        assert actions is not None, cmd
        data.append(Datum(x=tuple(cmd), y=tuple(actions), task="scan"))
    return data


def _contains_around_right(x: tuple[str, ...]) -> bool:
    return any(x[i] == "around" and x[i + 1] == "right" for i in range(len(x) - 1))


def jump_split(corpus: list[Datum]) -> Split:
    """One-shot split: 'jump' appears in train only as the bare primitive;
    every composed jump command is test."""
    train = [d for d in corpus if "jump" not in d.x or d.x == ("jump",)]
    test = [d for d in corpus if "jump" in d.x and d.x != ("jump",)]
    split = Split(train=train, tests={"jump": test})
    split.check()
    return split


def around_right_split(corpus: list[Datum]) -> Split:
    """Zero-shot split: the 'around right' construction appears only in test."""
    train = [d for d in corpus if not _contains_around_right(d.x)]
    test = [d for d in corpus if _contains_around_right(d.x)]
    split = Split(train=train, tests={"around_right": test})
    split.check()
    return split


_SCAN_LINE = re.compile(r"^IN:\s+(.+?)\s+OUT:\s+(.+?)\s*$")


def load_scan(path) -> list[Datum]:
    data = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            m = _SCAN_LINE.match(line)
            if m is None:
                raise ValueError(f"{path}:{lineno}: malformed line {line.rstrip()!r}")
            x = tuple(m.group(1).split())
            y = tuple(normalize_actions(m.group(2).split()))
            data.append(Datum(x=x, y=y, task="scan"))
    return data


def write_scan(path, data: list[Datum]):
    with open(path, "w", encoding="utf-8") as f:
        for d in data:
            f.write(f"IN: {' '.join(d.x)} OUT: {' '.join(d.y)}\n")


# ---------------------------------------------------------------------------
# morphology


def _chars(word: str) -> tuple[str, ...]:
    return tuple(SPACE_CHAR if c == " " else c for c in word)


def _unchars(tokens) -> str:
    return "".join(" " if c == SPACE_CHAR else c for c in tokens)


def morph_datum(lemma: str, inflected: str, tags: list[str],
                order: str = "analysis") -> Datum:
    lemma_t = _chars(lemma)
    infl_t = _chars(inflected)
    tags_t = tuple(tags)
    if order == "analysis":
        x, y = infl_t, lemma_t + tags_t
    elif order == "reinflection":
        x, y = lemma_t + tags_t, infl_t
    else:
        raise ValueError(f"unknown order {order!r}")
    return Datum(x=x, y=y, task="morph", lemma=lemma_t, tags=tags_t,
                 inflection=infl_t, order=order)


def load_sigmorphon(path, order: str = "analysis") -> list[Datum]:
    data = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ValueError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            lemma, inflected, tagstr = fields
            tags = [t for t in tagstr.split(";") if t]
            if not tags:
                raise ValueError(f"{path}:{lineno}: empty tag field")
            data.append(morph_datum(lemma, inflected, tags, order=order))
    return data


def write_sigmorphon(path, data: list[Datum]):
    with open(path, "w", encoding="utf-8") as f:
        for d in data:
            f.write(f"{_unchars(d.lemma)}\t{_unchars(d.inflection)}\t{';'.join(d.tags)}\n")


def datum_views(d: Datum) -> Datum:
    """Flip a morphology datum between analysis and reinflection order."""
    if d.task != "morph":
        raise ValueError("datum_views applies to morphology data only")
    new_order = "reinflection" if d.order == "analysis" else "analysis"
    return morph_datum(_unchars(d.lemma), _unchars(d.inflection), list(d.tags),
                       order=new_order)


def build_fewshot_split(data: list[Datum], hints: int, seed: int,
                        train_size: int = 1000, test_size: int = 100) -> Split:
    """Few-shot tense split: train holds exactly `hints` past and `hints`
    future examples; the rest of train and the 'other' test set are other
    word forms. Reproducible from the seed."""
    past, future, other = [], [], []
    for d in data:
        if "PST" in d.tags:  # PST wins over FUT when both present
            past.append(d)
        elif "FUT" in d.tags:
            future.append(d)
        else:
            other.append(d)
    n_other = train_size - 2 * hints
    if len(past) < hints + 1 or len(future) < hints + 1:
        raise ValueError(
            f"not enough tense coverage: {len(past)} past / {len(future)} future "
            f"examples for hints={hints}")
    if len(other) < n_other + 1:
        raise ValueError(f"need {n_other}+ other examples, have {len(other)}")
    rng = np.random.default_rng(seed)
    for pool in (past, future, other):
        rng.shuffle(pool)
    train = past[:hints] + future[:hints] + other[:n_other]
    train_flats = {d.flat for d in train}

    def take_test(pool):
        picked, seen = [], set()
        for d in pool:
            if d.flat in train_flats or d.flat in seen:
                continue
            picked.append(d)
            seen.add(d.flat)
            if len(picked) == test_size:
                break
        return picked

    split = Split(train=train,
                  tests={"pst": take_test(past[hints:]),
                         "fut": take_test(future[hints:]),
                         "other": take_test(other[n_other:])},
                  hints=hints, seed=seed)
    split.check()
    return split


# synthetic morphology fixture ------------------------------------------------

_FX_CONS = "bdfgklmnprstvz"
_FX_VOWELS = "aeiou"
_FX_TENSE_SUFFIX = {"PRS": "", "PST": "iv", "FUT": "or"}
_FX_PERSON_SUFFIX = {
    ("1", "SG"): "am", ("2", "SG"): "ak", ("3", "SG"): "a",
    ("1", "PL"): "emos", ("2", "PL"): "etis", ("3", "PL"): "en",
}
_FX_CASE_SUFFIX = {"NOM": "", "ACC": "un", "DAT": "ed"}
_FX_NUM_SUFFIX = {"SG": "", "PL": "ler"}


def _fx_stem(rng: np.random.Generator, syllables: int) -> str:
    return "".join(_FX_CONS[rng.integers(len(_FX_CONS))] +
                   _FX_VOWELS[rng.integers(len(_FX_VOWELS))]
                   for _ in range(syllables))


def generate_morph_fixture(n_past: int, n_future: int, n_other: int,
                           seed: int = 0) -> list[Datum]:
    """Deterministic synthetic agglutinative language: verb forms are
    stem + tense suffix + person/number ending, nouns are
    stem + case + number. 'Other' mixes present-tense verbs and nouns."""
    rng = np.random.default_rng(seed)
    persons = sorted(_FX_PERSON_SUFFIX)
    data, seen = [], set()

    def add_verb(tense):
        while True:
            stem = _fx_stem(rng, int(rng.integers(2, 4)))
            person, num = persons[rng.integers(len(persons))]
            key = (stem, tense, person, num)
            if key in seen:
                continue
            seen.add(key)
            lemma = stem + "er"
            form = stem + _FX_TENSE_SUFFIX[tense] + _FX_PERSON_SUFFIX[(person, num)]
            tags = ["V", "IND", tense, person, num]
            data.append(morph_datum(lemma, form, tags))
            return

    def add_noun():
        while True:
            stem = _fx_stem(rng, int(rng.integers(2, 4)))
            case = sorted(_FX_CASE_SUFFIX)[rng.integers(3)]
            num = ("SG", "PL")[rng.integers(2)]
            key = (stem, case, num)
            if key in seen:
                continue
            seen.add(key)
            form = stem + _FX_CASE_SUFFIX[case] + _FX_NUM_SUFFIX[num]
            data.append(morph_datum(stem, form, ["N", case, num]))
            return

    for _ in range(n_past):
        add_verb("PST")
    for _ in range(n_future):
        add_verb("FUT")
    for i in range(n_other):
        if i % 2 == 0:
            add_verb("PRS")
        else:
            add_noun()
    return data


# ---------------------------------------------------------------------------
# statistics and internal serialization


def token_marginals(data: list[Datum]) -> dict[str, float]:
    """Per-token document frequency: fraction of examples whose flat token
    sequence contains the token. Values lie in (0,1]; absent tokens are
    simply missing (treated as 0 by consumers)."""
    if not data:
        raise ValueError("token_marginals over empty data")
    counts: dict[str, int] = {}
    for d in data:
        for tok in set(d.flat):
            counts[tok] = counts.get(tok, 0) + 1
    n = len(data)
    return {tok: c / n for tok, c in counts.items()}


def write_lines(path, data: list[Datum], provenance: list[dict] | None = None):
    """Internal one-example-per-line format: `x-tokens ▷ y-tokens`, with an
    optional trailing `# provenance=<json>` comment per line."""
    with open(path, "w", encoding="utf-8") as f:
        for i, d in enumerate(data):
            line = d.line()
            if provenance is not None:
                line += "  # provenance=" + json.dumps(provenance[i], sort_keys=True)
            f.write(line + "\n")


def read_lines(path, task: str = "scan") -> tuple[list[Datum], list[dict | None]]:
    data, prov = [], []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            meta = None
            if "# provenance=" in line:
                line, _, rest = line.partition("# provenance=")
                meta = json.loads(rest)
            toks = line.split()
            if toks.count(SEP) != 1:
                raise ValueError(f"{path}:{lineno}: expected exactly one '{SEP}'")
            cut = toks.index(SEP)
            data.append(Datum(x=tuple(toks[:cut]), y=tuple(toks[cut + 1:]), task=task))
            prov.append(meta)
    return data, prov
