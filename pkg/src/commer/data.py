"""Synthetic datasets: per-user styled paraphrasing (skill signal spread over
documents), per-user fact QA (knowledge that must survive compression
verbatim), multi-document reconstruction examples for compressor pretraining,
and the mixed-format corpus the backbone itself is pretrained on.

Sentences come from a small fixed word bank, never natural corpora, so the
backbone's pretraining distribution matches the tasks. Style families are
chosen so that single documents genuinely underdetermine a user's style:
bases made of vowel-free words in palindromic order are fixed points of
word-reversal, vowel-doubling, and leet substitution alike, and the
parameterized families (which vowels double, which letters go digit) are only
revealed letter by letter as more documents arrive.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .errors import ContractViolation

# --------------------------------------------------------------------------
# Word banks
# --------------------------------------------------------------------------

ADJECTIVES = ("red", "blue", "old", "new", "cold", "warm", "dark", "bright",
              "small", "tall", "quiet", "loud", "green", "soft")
NOUNS = ("fox", "bird", "song", "river", "stone", "cloud", "dream", "wave",
         "leaf", "moon", "star", "tree", "road", "wind", "rain", "fish",
         "light", "night", "garden", "boat")
VERBS = ("sees", "finds", "likes", "holds", "takes", "makes", "hears",
         "follows", "keeps", "wants", "paints", "sings")

# No a/e/i/o/u anywhere: identity under vowel doubling and leet substitution.
NEUTRAL_WORDS = ("gym", "myth", "fly", "try", "dry", "why", "spy", "shy",
                 "sly", "fry", "cry", "sky", "hymn", "lynx", "glyph", "crypt")

SIGNATURE_TOKENS = ("zed", "vex", "iko", "quo", "jaz", "wip", "nox", "ume")

VOWELS = "aeiou"
LEET_MAP = {"a": "4", "e": "3", "i": "1", "o": "0"}

PERSONS = ("mira", "tano", "bela", "rinat", "sofi", "drel", "kuno", "yara",
           "pimo", "zola", "fenn", "oric", "hale", "ivet", "jory", "weka")
PLACES = ("doria", "velmar", "vanta", "tessin", "oruba", "finwick", "galeno",
          "prill", "sorev", "maku")
INSTRUMENTS = ("drum", "flute", "cello", "banjo", "organ", "viola", "chimes", "lute")
TOPICS = ("maps", "tides", "comets", "ferns", "glass", "steam", "clocks", "roots")
THINGS = ("kite", "lamp", "canoe", "mirror", "wagon", "flask", "ladder", "bell")

# (relation key, fact sentence template, question template, object bank)
RELATIONS = (
    ("works with", "{s} works with {o}.", "who works with {s}?", PERSONS),
    ("lives in", "{s} lives in {o}.", "where does {s} live?", PLACES),
    ("plays the", "{s} plays the {o}.", "what does {s} play?", INSTRUMENTS),
    ("studies", "{s} studies {o}.", "what does {s} study?", TOPICS),
    ("owns a", "{s} owns a {o}.", "what does {s} own?", THINGS),
)


# --------------------------------------------------------------------------
# Core records
# --------------------------------------------------------------------------


@dataclass
class Example:
    user_id: str
    docs: list[str]
    x: str
    y: str

    def to_json(self) -> dict:
        return {"user_id": self.user_id, "docs": self.docs, "x": self.x, "y": self.y}


@dataclass
class DatasetSplits:
    train: list[Example]
    val: list[Example]
    test: list[Example]
    meta: dict = field(default_factory=dict)

    def all_examples(self) -> list[Example]:
        return self.train + self.val + self.test


@dataclass(frozen=True)
class StyleSpec:
    user_id: str
    transform: str
    params: tuple = ()  # sorted key/value pairs, hashable

    def param(self, key: str):
        return dict(self.params)[key]


@dataclass(frozen=True)
class MemoryFact:
    user_id: str
    subject: str
    relation: str
    object: str

    def sentence(self) -> str:
        tpl = next(r[1] for r in RELATIONS if r[0] == self.relation)
        return tpl.format(s=self.subject, o=self.object)

    def question(self) -> str:
        tpl = next(r[2] for r in RELATIONS if r[0] == self.relation)
        return tpl.format(s=self.subject)


# --------------------------------------------------------------------------
# Style transforms
# --------------------------------------------------------------------------


def _reverse_words(s: str) -> str:
    return " ".join(reversed(s.split()))


def _double_vowels(s: str, vowels: str) -> str:
    return "".join(c + c if c in vowels else c for c in s)


def _leet(s: str, letters: str) -> str:
    return "".join(LEET_MAP[c] if c in letters else c for c in s)


def apply_style(spec: StyleSpec, s: str) -> str:
    if spec.transform == "uppercase":
        return s.upper()
    if spec.transform == "word-reversal":
        return _reverse_words(s)
    if spec.transform == "suffix-signature":
        return s + " " + spec.param("token")
    if spec.transform == "vowel-doubling":
        return _double_vowels(s, spec.param("vowels"))
    if spec.transform == "leet-substitution":
        return _leet(s, spec.param("letters"))
    raise ContractViolation(f"unknown transform {spec.transform!r}")


def all_style_variants() -> list[tuple[str, tuple]]:
    """Every (transform, params) pair, in a fixed order."""
    out: list[tuple[str, tuple]] = [("uppercase", ()), ("word-reversal", ())]
    out += [("suffix-signature", (("token", t),)) for t in SIGNATURE_TOKENS]
    out += [("vowel-doubling", (("vowels", "".join(c)),))
            for c in combinations(VOWELS, 2)]
    out += [("leet-substitution", (("letters", "".join(c)),))
            for c in combinations("aeio", 2)]
    return out


_STYLE_VARIANTS = all_style_variants()

# Conditioning codes for backbone pretraining text: one short consonant-heavy
# tag per style variant, standing in for what a compressor will later say
# with soft prompt rows.
_CODE_LETTERS = "bcdfghjklmnpqrstvwxz"


def style_code(transform: str, params: tuple) -> str:
    idx = _STYLE_VARIANTS.index((transform, params))
    n = len(_CODE_LETTERS)
    return _CODE_LETTERS[idx % n] + _CODE_LETTERS[(idx // n) % n] + _CODE_LETTERS[(idx * 7 + 3) % n]


# Family weights when assigning user styles: tilted toward the families whose
# identity or parameters stay ambiguous on small document sets.
FAMILY_WEIGHTS = (
    ("uppercase", 0.12),
    ("word-reversal", 0.22),
    ("suffix-signature", 0.12),
    ("vowel-doubling", 0.27),
    ("leet-substitution", 0.27),
)


def families_consistent_with(base: str, doc: str) -> set[str]:
    """Which style families (under any parameters) map base to doc."""
    out = set()
    if doc == base.upper():
        out.add("uppercase")
    if doc == _reverse_words(base):
        out.add("word-reversal")
    if any(doc == base + " " + t for t in SIGNATURE_TOKENS):
        out.add("suffix-signature")
    if any(doc == _double_vowels(base, "".join(c)) for c in combinations(VOWELS, 2)):
        out.add("vowel-doubling")
    if any(doc == _leet(base, "".join(c)) for c in combinations("aeio", 2)):
        out.add("leet-substitution")
    return out


# --------------------------------------------------------------------------
# Sentence grammar
# --------------------------------------------------------------------------


def base_sentence(rng: np.random.Generator, neutral: bool = False) -> str:
    """One lowercase sentence from the word bank.

    Neutral sentences use vowel-free words in palindromic word order, so
    reversal, doubling, and leet all fix them.
    """
    if neutral:
        if rng.random() < 0.4:
            return str(rng.choice(NEUTRAL_WORDS))
        w1, w2 = rng.choice(NEUTRAL_WORDS, size=2, replace=False)
        return f"{w1} {w2} {w1}"
    kind = int(rng.integers(0, 3))
    adj = rng.choice(ADJECTIVES)
    noun = rng.choice(NOUNS)
    verb = rng.choice(VERBS)
    noun2 = rng.choice(NOUNS)
    adj2 = rng.choice(ADJECTIVES)
    if kind == 0:
        return f"the {adj} {noun} {verb} the {noun2}"
    if kind == 1:
        return f"a {adj} {noun} {verb} a {adj2} {noun2}"
    return f"the {noun} {verb} the {adj} {noun2}"


def paragraph(rng: np.random.Generator, min_sentences: int = 1,
              max_sentences: int = 4) -> str:
    k = int(rng.integers(min_sentences, max_sentences + 1))
    return ". ".join(base_sentence(rng) for _ in range(k)) + "."


def _weighted_family(rng: np.random.Generator) -> str:
    names = [f for f, _ in FAMILY_WEIGHTS]
    weights = np.array([w for _, w in FAMILY_WEIGHTS])
    return names[int(rng.choice(len(names), p=weights / weights.sum()))]


def sample_style(rng: np.random.Generator, user_id: str) -> StyleSpec:
    family = _weighted_family(rng)
    if family == "suffix-signature":
        params = (("token", str(rng.choice(SIGNATURE_TOKENS))),)
    elif family == "vowel-doubling":
        combos = ["".join(c) for c in combinations(VOWELS, 2)]
        params = (("vowels", combos[int(rng.integers(0, len(combos)))]),)
    elif family == "leet-substitution":
        combos = ["".join(c) for c in combinations("aeio", 2)]
        params = (("letters", combos[int(rng.integers(0, len(combos)))]),)
    else:
        params = ()
    return StyleSpec(user_id=user_id, transform=family, params=params)


# --------------------------------------------------------------------------
# Skill dataset (personalized paraphrasing)
# --------------------------------------------------------------------------


def gen_skill_dataset(n_users: int, docs_per_user: int, seed: int,
                      examples_per_user: int = 4,
                      neutral_fraction: float = 0.5) -> DatasetSplits:
    """Per user: a style, documents that are styled renderings of word-bank
    sentences, and paraphrase examples whose target applies the style to a
    fresh sentence. Splits are disjoint at the user level.
    """
    if n_users < 8:
        raise ContractViolation("need at least 8 users for user-level splits")
    rng = np.random.default_rng(seed)
    styles: dict[str, StyleSpec] = {}
    by_user: dict[str, list[Example]] = {}
    doc_bases: dict[str, list[str]] = {}
    for u in range(n_users):
        uid = f"u{u:04d}"
        spec = sample_style(rng, uid)
        styles[uid] = spec
        bases = []
        docs = []
        for _ in range(docs_per_user):
            base = base_sentence(rng, neutral=rng.random() < neutral_fraction)
            bases.append(base)
            docs.append(apply_style(spec, base))
        doc_bases[uid] = bases
        examples = []
        for _ in range(examples_per_user):
            plain = base_sentence(rng)
            while plain in bases:
                plain = base_sentence(rng)
            examples.append(Example(uid, list(docs), f"Paraphrase: {plain}",
                                    apply_style(spec, plain)))
        by_user[uid] = examples

    uids = list(by_user)
    order = rng.permutation(len(uids))
    n_train = max(1, round(0.7 * n_users))
    n_val = max(1, round(0.1 * n_users))
    train_ids = [uids[i] for i in order[:n_train]]
    val_ids = [uids[i] for i in order[n_train:n_train + n_val]]
    test_ids = [uids[i] for i in order[n_train + n_val:]]
    splits = DatasetSplits(
        train=[e for u in train_ids for e in by_user[u]],
        val=[e for u in val_ids for e in by_user[u]],
        test=[e for u in test_ids for e in by_user[u]],
        meta={"task": "skill", "seed": seed, "n_users": n_users,
              "docs_per_user": docs_per_user,
              "styles": {u: {"transform": s.transform, "params": dict(s.params)}
                         for u, s in styles.items()},
              "doc_bases": doc_bases,
              "train_users": train_ids, "val_users": val_ids, "test_users": test_ids})
    return splits


# --------------------------------------------------------------------------
# Knowledge dataset (personal fact QA)
# --------------------------------------------------------------------------


def _sample_facts(rng: np.random.Generator, uid: str, n: int) -> list[MemoryFact]:
    """Facts with unique (subject, relation) pairs whose answer strings occur
    in exactly one of the user's rendered sentences."""
    facts: list[MemoryFact] = []
    used_pairs = set()
    guard = 0
    while len(facts) < n:
        guard += 1
        if guard > 2000:
            raise ContractViolation("could not sample enough distinct facts")
        rel, _, _, bank = RELATIONS[int(rng.integers(0, len(RELATIONS)))]
        subject = str(rng.choice(PERSONS))
        obj = str(rng.choice(bank))
        if (subject, rel) in used_pairs or obj == subject:
            continue
        cand = MemoryFact(uid, subject, rel, obj)
        sentence = cand.sentence()
        if any(f.object in sentence for f in facts):
            continue
        if any(obj in f.sentence() for f in facts):
            continue
        used_pairs.add((subject, rel))
        facts.append(cand)
    return facts


def gen_knowledge_dataset(n_users: int, facts_per_user: int, docs_per_example: int,
                          seed: int, examples_per_user: int = 6) -> DatasetSplits:
    """Per example: one target fact plus shuffled distractor facts from the
    same user; the question asks about the target and the answer appears
    verbatim in exactly one document."""
    if docs_per_example > facts_per_user:
        raise ContractViolation("docs_per_example cannot exceed facts_per_user")
    if n_users < 8:
        raise ContractViolation("need at least 8 users for user-level splits")
    rng = np.random.default_rng(seed)
    by_user: dict[str, list[Example]] = {}
    all_facts: dict[str, list[MemoryFact]] = {}
    for u in range(n_users):
        uid = f"k{u:04d}"
        facts = _sample_facts(rng, uid, facts_per_user)
        all_facts[uid] = facts
        examples = []
        for _ in range(examples_per_user):
            ti = int(rng.integers(0, len(facts)))
            target = facts[ti]
            others = [f for i, f in enumerate(facts) if i != ti]
            pick = rng.permutation(len(others))[:docs_per_example - 1]
            docs = [target.sentence()] + [others[i].sentence() for i in pick]
            docs = [docs[i] for i in rng.permutation(len(docs))]
            for d in docs:
                if target.object in d and d != target.sentence():
                    raise ContractViolation("distractor contains the answer")
            examples.append(Example(uid, docs, target.question(), target.object))
        by_user[uid] = examples

    uids = list(by_user)
    order = rng.permutation(len(uids))
    n_train = max(1, round(0.7 * n_users))
    n_val = max(1, round(0.1 * n_users))
    train_ids = [uids[i] for i in order[:n_train]]
    val_ids = [uids[i] for i in order[n_train:n_train + n_val]]
    test_ids = [uids[i] for i in order[n_train + n_val:]]
    return DatasetSplits(
        train=[e for u in train_ids for e in by_user[u]],
        val=[e for u in val_ids for e in by_user[u]],
        test=[e for u in test_ids for e in by_user[u]],
        meta={"task": "knowledge", "seed": seed, "n_users": n_users,
              "facts_per_user": facts_per_user, "docs_per_example": docs_per_example,
              "train_users": train_ids, "val_users": val_ids, "test_users": test_ids})


# --------------------------------------------------------------------------
# Reconstruction pretraining task
# --------------------------------------------------------------------------

DOC_TRUNCATE_CHARS = 150


def gen_pretrain_example(docs: list[str], n: int | None, seed: int | None = None) -> Example:
    """Index-prefixed documents with a which-document reconstruction query.

    Documents are truncated to 150 characters. When n is None it is drawn
    uniformly from the valid range using `seed`.
    """
    if not docs:
        raise ContractViolation("need at least one document")
    if n is None:
        n = 1 + int(np.random.default_rng(seed).integers(0, len(docs)))
    if not 1 <= n <= len(docs):
        raise ContractViolation(f"n={n} outside 1..{len(docs)}")
    truncated = [d[:DOC_TRUNCATE_CHARS] for d in docs]
    prefixed = [f"Document {i + 1}: {d}" for i, d in enumerate(truncated)]
    return Example(user_id="pretrain", docs=prefixed,
                   x=f"What does document {n} contain?", y=truncated[n - 1])


def gen_pretrain_dataset(n_examples: int, seed: int, max_docs: int = 3,
                         max_sentences: int = 2,
                         doc_source: str = "plain") -> list[Example]:
    """Reconstruction examples over synthetic documents, grouped 1..max_docs
    per example with the queried index chosen at random.

    doc_source "plain" draws generic paragraphs; "styled" draws one style per
    example and renders every document through it, the analogue of running
    the auto-encoding task over a user's own documents.
    """
    if doc_source not in ("plain", "styled"):
        raise ContractViolation(f"unknown doc_source {doc_source!r}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_examples):
        k = int(rng.integers(1, max_docs + 1))
        spec = sample_style(rng, "pretrain") if doc_source == "styled" else None
        docs: list[str] = []
        while len(docs) < k:
            if spec is None:
                p = paragraph(rng, max_sentences=max_sentences)
            else:
                p = apply_style(spec, base_sentence(rng))
            if p not in docs:
                docs.append(p)
        n = 1 + int(rng.integers(0, k))
        out.append(gen_pretrain_example(docs, n))
    return out


# --------------------------------------------------------------------------
# Backbone pretraining corpus
# --------------------------------------------------------------------------


def _corpus_skill_line(rng: np.random.Generator) -> str:
    transform, params = _STYLE_VARIANTS[int(rng.integers(0, len(_STYLE_VARIANTS)))]
    spec = StyleSpec("corpus", transform, params)
    plain = base_sentence(rng, neutral=rng.random() < 0.1)
    # Conditioning region width varies so downstream soft prefixes of
    # different sizes stay in distribution.
    code = style_code(transform, params)
    reps = int(rng.integers(1, 5))
    tag = " ".join([code] * reps)
    return f"{tag} Paraphrase: {plain}\n{apply_style(spec, plain)}"


def _corpus_qa_line(rng: np.random.Generator) -> str:
    k = int(rng.integers(1, 5))
    facts = _sample_facts(rng, "corpus", k)
    target = facts[int(rng.integers(0, k))]
    lines = [f.sentence() for f in facts]
    return "\n".join(lines) + f"\n{target.question()}\n{target.object}"


def _corpus_recon_line(rng: np.random.Generator) -> str:
    k = int(rng.integers(1, 4))
    docs = []
    while len(docs) < k:
        p = paragraph(rng, max_sentences=2)
        if p not in docs:
            docs.append(p)
    ex = gen_pretrain_example(docs, 1 + int(rng.integers(0, k)))
    return "\n".join(ex.docs) + f"\n{ex.x}\n{ex.y}"


def gen_backbone_corpus(seed: int):
    """Infinite stream of pretraining lines mixing plain sentences with the
    three downstream task formats (style-coded paraphrasing, fact QA,
    indexed reconstruction)."""
    rng = np.random.default_rng(seed)
    while True:
        r = rng.random()
        if r < 0.15:
            yield paragraph(rng, max_sentences=2)
        elif r < 0.55:
            yield _corpus_skill_line(rng)
        elif r < 0.80:
            yield _corpus_qa_line(rng)
        else:
            yield _corpus_recon_line(rng)


# --------------------------------------------------------------------------
# Generic ingestion and per-example document selection
# --------------------------------------------------------------------------


def save_jsonl(path, examples: list[Example]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_json(), sort_keys=True) + "\n")


def load_jsonl(path, char_cap: int = 2900) -> tuple[list[Example], int]:
    """Load examples, dropping any whose total character count exceeds the
    cap. Returns (examples, dropped_count)."""
    out: list[Example] = []
    dropped = 0
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                ex = Example(user_id=obj["user_id"], docs=list(obj["docs"]),
                             x=obj["x"], y=obj["y"])
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise ContractViolation(f"{path}:{lineno}: malformed example: {e}") from e
            if not ex.x or not ex.y:
                raise ContractViolation(f"{path}:{lineno}: empty instruction or target")
            total = len(ex.x) + len(ex.y) + sum(len(d) for d in ex.docs)
            if total > char_cap:
                dropped += 1
                continue
            out.append(ex)
    return out, dropped


def subsample_docs(docs: list[str], y: str, n: int, rng: np.random.Generator) -> list[str]:
    """Pick n documents for an example, shuffled.

    If some document contains the target verbatim (knowledge examples), it is
    always kept so the example stays answerable; the rest are sampled.
    """
    if n <= 0:
        return []
    if n >= len(docs):
        return [docs[i] for i in rng.permutation(len(docs))]
    relevant = [i for i, d in enumerate(docs) if y in d]
    keep: list[int] = []
    if relevant:
        keep.append(relevant[0])
    pool = [i for i in range(len(docs)) if i not in keep]
    extra = rng.permutation(len(pool))[: n - len(keep)]
    keep.extend(pool[i] for i in extra)
    keep = [keep[i] for i in rng.permutation(len(keep))]
    return [docs[i] for i in keep]
