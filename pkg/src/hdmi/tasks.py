"""Synthetic agreement corpora and minimal-pair suites over a closed word vocabulary.

Two families of data are produced here:

* an agreement corpus in the style of the LGD Wikipedia set: a subject noun
  phrase, optionally followed by a prepositional distractor, ending right
  before the verb. ``z_c`` is subject number and ``z_e`` the number of the
  distractor noun (0 when there is none);
* minimal-pair suites in the style of CausalGym. Each pair yields two labelled
  examples with source/target tokens exchanged, and ``z_e`` is read off the
  prompt by :func:`assign_ze`.

The vocabulary is closed and word-level, so every label is a single token.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CapacityError, ConfigurationError, DegenerateLabelError, InputError

PAD, BOS, EOS, MASK = "<pad>", "<bos>", "<eos>", "<mask>"

NOUNS = [
    ("key", "keys"), ("author", "authors"), ("senator", "senators"), ("dog", "dogs"),
    ("teacher", "teachers"), ("student", "students"), ("farmer", "farmers"),
    ("pilot", "pilots"), ("doctor", "doctors"), ("singer", "singers"),
    ("cabinet", "cabinets"), ("table", "tables"),
]
ADJECTIVES = ["old", "new", "big", "small", "red"]
PREPOSITIONS = ["of", "in", "with", "by", "near", "behind", "on", "at", "from", "to",
                "under", "for"]
VERB_PAIRS = [("is", "are"), ("was", "were"), ("has", "have")]
# tense slot -> (leading adverb or None, verb pair index)
TENSES = [(None, 0), ("today", 0), ("yesterday", 1), ("recently", 2)]
COMPLEMENTS = {
    "is": ["here", "there", "ready", "happy", "late"],
    "was": ["here", "there", "ready", "happy", "late"],
    "has": ["left", "won", "arrived"],
}
MALE_NAMES = ["john", "bob", "tom", "jim", "sam"]
FEMALE_NAMES = ["jane", "mary", "anna", "sue", "kate"]
MOTION_VERBS = ["walked", "ran", "smiled", "slept", "laughed"]
REASONS = ["tired", "happy", "late", "ready"]
CLEFT_VERBS = [("fix", "fixed"), ("clean", "cleaned"), ("paint", "painted"),
               ("build", "built")]
FUNCTION_WORDS = ["today", "yesterday", "recently", "the", "no", "some", "any", "that", "what",
                  "i", "know", "did", "because", "he", "she", "liked", "seen", "saw", "."]

ZE_FAMILY = {"of": 1, "in": 2, "with": 3, "by": 3}
ZE_WINDOW = 12

SUITES = ("agr_gender", "agr_sv_num_pp", "npi_any", "cleft", "filler_gap")
AGREEMENT = "lgd_agreement"


def _build_words() -> list[str]:
    words = [PAD, BOS, EOS, MASK]
    groups = [FUNCTION_WORDS, [w for pair in VERB_PAIRS for w in pair], PREPOSITIONS,
              [w for pair in NOUNS for w in pair], ADJECTIVES,
              [w for ws in COMPLEMENTS.values() for w in ws], MALE_NAMES, FEMALE_NAMES,
              MOTION_VERBS, REASONS, [w for pair in CLEFT_VERBS for w in pair]]
    for group in groups:
        for w in group:
            if w not in words:
                words.append(w)
    return words


class Vocab:
    """Whitespace word-level tokenizer over a fixed word list."""

    def __init__(self, words: Sequence[str]):
        self.words = list(words)
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise InputError("duplicate words in vocabulary")

    def __len__(self) -> int:
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word in self.index

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def bos_id(self) -> int:
        return self.index[BOS]

    def id(self, word: str) -> int:
        try:
            return self.index[word]
        except KeyError:
            raise InputError(f"unknown word {word!r}") from None

    def encode(self, text: str | Sequence[str], bos: bool = True) -> list[int]:
        words = text.split() if isinstance(text, str) else list(text)
        ids = [self.id(w) for w in words]
        return [self.bos_id] + ids if bos else ids

    def decode(self, ids: Iterable[int], skip_special: bool = True) -> str:
        out = [self.words[int(i)] for i in ids]
        if skip_special:
            out = [w for w in out if w not in (PAD, BOS, EOS, MASK)]
        return " ".join(out)


VOCAB = Vocab(_build_words())
PREPOSITION_IDS = {VOCAB.id(p): p for p in PREPOSITIONS}


@dataclass(frozen=True)
class LabeledExample:
    prompt: tuple[int, ...]
    source_token: int
    target_token: int
    z_c: int
    z_e: int
    suite: str
    slots: tuple = field(default=(), compare=False)

    def __post_init__(self):
        if self.source_token == self.target_token:
            raise InputError("source and target tokens must differ")

    @property
    def text(self) -> str:
        return VOCAB.decode(self.prompt)


@dataclass(frozen=True)
class MinimalPair:
    x_src: tuple[int, ...]
    x_cf: tuple[int, ...]
    y_src: int
    y_cf: int


@dataclass(frozen=True)
class SplitSpec:
    interventional: tuple[int, ...]
    validation_probe: tuple[int, ...]
    test: tuple[int, ...]
    seed: int

    def __post_init__(self):
        a, b, c = map(set, (self.interventional, self.validation_probe, self.test))
        if a & b or a & c or b & c:
            raise ConfigurationError("splits overlap")


def assign_ze(prompt: Sequence[int]) -> int:
    """Preposition family of the most recent preposition in the last 12 tokens.

    0 = none, 1 = of, 2 = in, 3 = with/by, 4 = any other preposition.
    """
    for tok in reversed(list(prompt)[-ZE_WINDOW:]):
        word = PREPOSITION_IDS.get(int(tok))
        if word is not None:
            return ZE_FAMILY.get(word, 4)
    return 0


# --- agreement corpus -------------------------------------------------------

def _noun(idx: int, plural: int) -> str:
    return NOUNS[idx][plural]


def _agreement_words(slots) -> tuple[list[str], str, str, int, int]:
    noun, plural, adj, pp, tense = slots
    adverb, verb = TENSES[tense]
    words = [adverb] if adverb else []
    words += ["the"] + ([ADJECTIVES[adj]] if adj >= 0 else []) + [_noun(noun, plural)]
    if pp is None:
        z_e = 0
    else:
        prep, noun2, plural2 = pp
        words += [PREPOSITIONS[prep], "the", _noun(noun2, plural2)]
        z_e = 1 + plural2
    sg, pl = VERB_PAIRS[verb]
    src, tgt = (pl, sg) if plural else (sg, pl)
    return words, src, tgt, plural, z_e


def _agreement_example(slots, suite: str = AGREEMENT) -> LabeledExample:
    words, src, tgt, z_c, z_e = _agreement_words(slots)
    prompt = tuple(VOCAB.encode(words))
    if suite != AGREEMENT:
        z_e = assign_ze(prompt)
    return LabeledExample(prompt, VOCAB.id(src), VOCAB.id(tgt), z_c, z_e, suite, tuple(slots))


def _agreement_capacity(z_e: int) -> int:
    per_subject = len(NOUNS) * (len(ADJECTIVES) + 1) * len(TENSES)
    if z_e == 0:
        return per_subject
    return per_subject * len(PREPOSITIONS) * len(NOUNS)


def _draw_agreement_slots(rng, z_c: int, z_e: int):
    noun = int(rng.integers(len(NOUNS)))
    adj = int(rng.integers(-1, len(ADJECTIVES)))
    pp = None
    if z_e:
        pp = (int(rng.integers(len(PREPOSITIONS))), int(rng.integers(len(NOUNS))), z_e - 1)
    return (noun, z_c, adj, pp, int(rng.integers(len(TENSES))))


def _balanced_cells(n: int, cells: Sequence, rng) -> list:
    """Cell assignment for ``n`` draws with counts as equal as possible."""
    order = [cells[i % len(cells)] for i in range(n)]
    rng.shuffle(order)
    return order


def _sample_unique(n: int, cells, capacity, draw, rng, replace: bool, max_tries: int = 200):
    assignment = _balanced_cells(n, cells, rng)
    if not replace:
        for cell in cells:
            need = sum(1 for c in assignment if c == cell)
            if need > capacity(cell):
                raise CapacityError(f"cell {cell} needs {need} distinct items, "
                                    f"template capacity is {capacity(cell)}")
    seen: set = set()
    out = []
    for cell in assignment:
        for _ in range(max_tries * max(1, n)):
            slots = draw(rng, cell)
            if replace or slots not in seen:
                break
        else:
            raise CapacityError(f"could not draw a fresh item for cell {cell}")
        seen.add(slots)
        out.append(slots)
    return out


def gen_agreement_suite(n: int, seed: int, replace: bool = False) -> list[LabeledExample]:
    """Agreement prompts ending at the verb slot, balanced over (z_c, z_e)."""
    if n < 1:
        raise InputError("n must be positive")
    rng = np.random.default_rng(seed)
    cells = [(zc, ze) for zc in (0, 1) for ze in (0, 1, 2)]
    slots = _sample_unique(n, cells, lambda c: _agreement_capacity(c[1]),
                           lambda r, c: _draw_agreement_slots(r, *c), rng, replace)
    return [_agreement_example(s) for s in slots]


def flip_example(ex: LabeledExample) -> LabeledExample:
    """Regenerate ``ex`` with the causal property flipped."""
    if not ex.slots:
        raise InputError("example carries no template slots")
    if ex.suite in (AGREEMENT, "agr_sv_num_pp"):
        noun, plural, adj, pp, tense = ex.slots
        return _agreement_example((noun, 1 - plural, adj, pp, tense), ex.suite)
    pair_slots, z_c = ex.slots
    return _PAIR_BUILDERS[ex.suite](pair_slots)[1 - z_c]


# --- minimal-pair suites -------------------------------------------------------

def _pp_words(pp) -> list[str]:
    if pp is None:
        return []
    prep, noun, plural = pp
    return [PREPOSITIONS[prep], "the", _noun(noun, plural)]


def _draw_pp(rng, p_none: float = 0.3):
    if rng.random() < p_none:
        return None
    return (int(rng.integers(len(PREPOSITIONS))), int(rng.integers(len(NOUNS))),
            int(rng.integers(2)))


def _pair_examples(suite, slots, words_src, words_cf, y_src, y_cf) -> tuple[LabeledExample, ...]:
    p_src, p_cf = tuple(VOCAB.encode(words_src)), tuple(VOCAB.encode(words_cf))
    a, b = VOCAB.id(y_src), VOCAB.id(y_cf)
    return (LabeledExample(p_src, a, b, 0, assign_ze(p_src), suite, (slots, 0)),
            LabeledExample(p_cf, b, a, 1, assign_ze(p_cf), suite, (slots, 1)))


def _gender_pair(slots):
    m, f, verb, pp = slots
    tail = [MOTION_VERBS[verb]] + _pp_words(pp) + ["because"]
    return _pair_examples("agr_gender", slots, [MALE_NAMES[m]] + tail,
                          [FEMALE_NAMES[f]] + tail, "he", "she")


def _sv_num_pair(slots):
    noun, adj, pp, tense = slots
    ex = [_agreement_example((noun, plural, adj, pp, tense), "agr_sv_num_pp") for plural in (0, 1)]
    return ex[0], ex[1]


def _npi_pair(slots):
    noun, noun2, plural2, pp = slots
    rest = [_noun(noun, 0), "that", "the", _noun(noun2, plural2)] + _pp_words(pp) + [
        "liked", "has", "seen"]
    return _pair_examples("npi_any", slots, ["the"] + rest, ["no"] + rest, "some", "any")


def _cleft_pair(slots):
    noun, pp, verb = slots
    bare, past = CLEFT_VERBS[verb]
    head = ["what", "the", _noun(noun, 0)] + _pp_words(pp)
    return _pair_examples("cleft", slots, head + ["did", "was"], head + [past, "was"],
                          bare, "the")


def _filler_gap_pair(slots):
    noun, pp = slots
    tail = ["the", _noun(noun, 0)] + _pp_words(pp) + ["saw"]
    return _pair_examples("filler_gap", slots, ["i", "know", "that"] + tail,
                          ["i", "know", "what"] + tail, "the", ".")


def _draw_pair_slots(suite: str, rng):
    n_nouns = len(NOUNS)
    if suite == "agr_gender":
        return (int(rng.integers(len(MALE_NAMES))), int(rng.integers(len(FEMALE_NAMES))),
                int(rng.integers(len(MOTION_VERBS))), _draw_pp(rng))
    if suite == "agr_sv_num_pp":
        return (int(rng.integers(n_nouns)), int(rng.integers(-1, len(ADJECTIVES))),
                _draw_pp(rng, p_none=0.0), int(rng.integers(len(TENSES))))
    if suite == "npi_any":
        return (int(rng.integers(n_nouns)), int(rng.integers(n_nouns)), int(rng.integers(2)),
                _draw_pp(rng, p_none=0.5))
    if suite == "cleft":
        return (int(rng.integers(n_nouns)), _draw_pp(rng), int(rng.integers(len(CLEFT_VERBS))))
    return (int(rng.integers(n_nouns)), _draw_pp(rng))


_PAIR_BUILDERS = {
    "agr_gender": _gender_pair,
    "agr_sv_num_pp": _sv_num_pair,
    "npi_any": _npi_pair,
    "cleft": _cleft_pair,
    "filler_gap": _filler_gap_pair,
}


def gen_minimal_pairs(name: str, n_pairs: int, seed: int) -> list[MinimalPair]:
    if name not in _PAIR_BUILDERS:
        raise InputError(f"unknown suite {name!r}; choose from {SUITES}")
    rng = np.random.default_rng(seed)
    pairs = []
    for _ in range(n_pairs):
        src, cf = _PAIR_BUILDERS[name](_draw_pair_slots(name, rng))
        pairs.append(MinimalPair(src.prompt, cf.prompt, src.source_token, cf.source_token))
    return pairs


def gen_causalgym_suite(name: str, n: int, seed: int) -> list[LabeledExample]:
    """``n`` examples from ``ceil(n / 2)`` minimal pairs, two per pair with roles swapped."""
    if name not in _PAIR_BUILDERS:
        raise InputError(f"unknown suite {name!r}; choose from {SUITES}")
    if n < 1:
        raise InputError("n must be positive")
    rng = np.random.default_rng(seed)
    out: list[LabeledExample] = []
    while len(out) < n:
        out.extend(_PAIR_BUILDERS[name](_draw_pair_slots(name, rng)))
    return out[:n]


def gen_suite(name: str, n: int, seed: int) -> list[LabeledExample]:
    if name == AGREEMENT:
        return gen_agreement_suite(n, seed)
    return gen_causalgym_suite(name, n, seed)


# --- language-model corpus ----------------------------------------------------

def _complete_agreement(words, verb_word, rng) -> list[str]:
    base = {"are": "is", "were": "was", "have": "has"}.get(verb_word, verb_word)
    comps = COMPLEMENTS[base]
    return words + [verb_word, comps[int(rng.integers(len(comps)))], "."]


def _sentence(suite: str, rng) -> list[str]:
    if suite == AGREEMENT:
        z_c, z_e = int(rng.integers(2)), int(rng.integers(3))
        words, src, _, _, _ = _agreement_words(_draw_agreement_slots(rng, z_c, z_e))
        return _complete_agreement(words, src, rng)
    slots = _draw_pair_slots(suite, rng)
    ex = _PAIR_BUILDERS[suite](slots)[int(rng.integers(2))]
    words = VOCAB.decode(ex.prompt).split()
    label = VOCAB.words[ex.source_token]
    if suite == "agr_sv_num_pp":
        return _complete_agreement(words, label, rng)
    if suite == "agr_gender":
        return words + [label, "was", REASONS[int(rng.integers(len(REASONS)))], "."]
    if suite == "npi_any":
        return words + [label, _noun(int(rng.integers(len(NOUNS))), 1), "."]
    if suite == "cleft":
        obj = ["the", _noun(int(rng.integers(len(NOUNS))), 0), "."]
        return words + ([label] + obj if label != "the" else obj)
    if label == "the":
        return words + ["the", _noun(int(rng.integers(len(NOUNS))), 0), "."]
    return words + ["."]


def gen_corpus(n: int, seed: int, suites: Sequence[str] = (AGREEMENT,) + SUITES,
               agreement_share: float = 0.5) -> list[list[int]]:
    """Full sentences (BOS ... EOS) for language-model training.

    ``agreement_share`` of the sentences come from the agreement grammar; the
    rest are spread evenly over the other suites.
    """
    if n < 1:
        raise InputError("corpus size must be positive")
    rng = np.random.default_rng(seed)
    others = [s for s in suites if s != AGREEMENT]
    out = []
    for _ in range(n):
        if AGREEMENT in suites and (not others or rng.random() < agreement_share):
            suite = AGREEMENT
        else:
            suite = others[int(rng.integers(len(others)))]
        out.append(VOCAB.encode(_sentence(suite, rng)) + [VOCAB.id(EOS)])
    return out


# --- splits -------------------------------------------------------------------

def independence_indices(z_c: Sequence[int], z_e: Sequence[int], seed: int) -> list[int]:
    """Indices giving every occupied (z_c, z_e) cell the minimum occupied count."""
    z_c, z_e = list(z_c), list(z_e)
    if len(set(z_c)) < 2 or len(set(z_e)) < 2:
        raise DegenerateLabelError("both z_c and z_e need at least two classes")
    cells: dict[tuple[int, int], list[int]] = {}
    for i, key in enumerate(zip(z_c, z_e)):
        cells.setdefault(key, []).append(i)
    k = min(len(v) for v in cells.values())
    rng = np.random.default_rng(seed)
    keep = []
    for key in sorted(cells):
        idx = cells[key]
        chosen = rng.choice(len(idx), size=k, replace=False)
        keep.extend(idx[j] for j in sorted(chosen))
    return sorted(keep)


def independence_subsample(examples: Sequence[LabeledExample], seed: int) -> list[LabeledExample]:
    keep = independence_indices([e.z_c for e in examples], [e.z_e for e in examples], seed)
    return [examples[i] for i in keep]


def make_splits(examples: Sequence[LabeledExample], fractions=(0.4, 0.3, 0.3),
                seed: int = 0) -> SplitSpec:
    """Disjoint interventional / validation-probe / test index sets.

    The validation-probe part is reduced by :func:`independence_indices`.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-12:
        raise ConfigurationError(f"invalid split fractions {fractions}")
    n = len(examples)
    perm = np.random.default_rng(seed).permutation(n)
    sizes = [int(np.floor(n * f + 1e-9)) for f in fractions]
    if any(s == 0 for s in sizes):
        raise ConfigurationError(f"a split is empty for n={n} and fractions {fractions}")
    cut = np.cumsum(sizes)
    inter, val, test = perm[:cut[0]], perm[cut[0]:cut[1]], perm[cut[1]:cut[2]]
    keep = independence_indices([examples[i].z_c for i in val],
                                [examples[i].z_e for i in val], seed + 1)
    val = val[keep]
    if len(val) == 0:
        raise ConfigurationError("validation-probe split is empty after subsampling")
    return SplitSpec(tuple(sorted(int(i) for i in inter)), tuple(sorted(int(i) for i in val)),
                     tuple(sorted(int(i) for i in test)), seed)


# --- dataset files --------------------------------------------------------------

def write_dataset(path: str | Path, examples: Iterable[LabeledExample]) -> None:
    """One tab-separated record per example: prompt, v_a, v_b, z_c, z_e, suite."""
    lines = []
    for ex in examples:
        lines.append("\t".join([VOCAB.decode(ex.prompt), VOCAB.words[ex.source_token],
                                VOCAB.words[ex.target_token], str(ex.z_c), str(ex.z_e),
                                ex.suite]))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_dataset(path: str | Path) -> list[LabeledExample]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 6:
            raise InputError(f"{path}:{lineno}: expected 6 tab-separated fields")
        prompt, va, vb, zc, ze, suite = fields
        out.append(LabeledExample(tuple(VOCAB.encode(prompt)), VOCAB.id(va), VOCAB.id(vb),
                                  int(zc), int(ze), suite))
    return out


def write_corpus(path: str | Path, corpus: Iterable[Sequence[int]]) -> None:
    Path(path).write_text("".join(VOCAB.decode(s) + "\n" for s in corpus), encoding="utf-8")


def read_corpus(path: str | Path) -> list[list[int]]:
    eos = VOCAB.id(EOS)
    return [VOCAB.encode(line) + [eos]
            for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()]

