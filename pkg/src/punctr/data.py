"""Corpus ingestion: punctuated text to (words, labels), CoNLL-style POS
files, vocabulary construction, batching, and the synthetic fixture corpus.

Punctuation label scheme: each word carries the class of the mark that
immediately follows it, O if none. Commas, colons and dashes map to COMMA;
periods, exclamation marks and semicolons map to PERIOD; question marks map
to QUESTION. Consecutive marks collapse to the first one. Quotation marks,
parentheses and brackets are stripped without a label. Text is lowercased
with accents folded to ASCII.
"""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DataError

PUNCT_LABELS = ("O", "COMMA", "PERIOD", "QUESTION")
PUNCT_LABEL_TO_ID = {label: i for i, label in enumerate(PUNCT_LABELS)}

POS_TAGS = (
    "CC", "CD", "DT", "EX", "FW", "IN", "JJ", "JJR", "JJS", "LS", "MD", "NN",
    "NNS", "NNP", "NNPS", "PDT", "POS", "PRP", "PRP$", "RB", "RBR", "RBS",
    "RP", "SYM", "TO", "UH", "VB", "VBD", "VBG", "VBN", "VBP", "VBZ", "WDT",
    "WP", "WP$", "WRB",
)
POS_TAG_TO_ID = {tag: i for i, tag in enumerate(POS_TAGS)}

TASK_PUN = "PUN"
TASK_POS = "POS"
TASK_IDS = {TASK_PUN: 0, TASK_POS: 1}

PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
SPECIAL_TOKENS = ("<pad>", "<unk>", "<mask>")
LABEL_PAD = -1

_MARK_CLASS = {
    ",": "COMMA", ":": "COMMA", "—": "COMMA", "–": "COMMA",
    ".": "PERIOD", "!": "PERIOD", ";": "PERIOD",
    "?": "QUESTION",
}
_CANONICAL_MARK = {"COMMA": ",", "PERIOD": ".", "QUESTION": "?"}
_STRIP_CHARS = "\"()[]{}“”«»"


@dataclass(frozen=True)
class LabeledSequence:
    words: tuple[str, ...]
    labels: tuple[str, ...]
    task: str

    def __post_init__(self):
        if len(self.words) != len(self.labels):
            raise DataError(f"{len(self.words)} words vs {len(self.labels)} labels")
        if self.task not in TASK_IDS:
            raise DataError(f"unknown task {self.task!r}")
        allowed = PUNCT_LABELS if self.task == TASK_PUN else POS_TAGS
        for label in self.labels:
            if label not in allowed:
                raise DataError(f"label {label!r} not valid for task {self.task}")

    def __len__(self) -> int:
        return len(self.words)

    def label_ids(self) -> np.ndarray:
        table = PUNCT_LABEL_TO_ID if self.task == TASK_PUN else POS_TAG_TO_ID
        return np.array([table[label] for label in self.labels], dtype=np.int64)


def normalize_text(text: str) -> str:
    """Lowercase and fold accents away (uncased convention)."""
    decomposed = unicodedata.normalize("NFD", text)
    stripped = "".join(ch for ch in decomposed if not unicodedata.combining(ch))
    return stripped.lower()


def tokenize_and_label(text: str) -> LabeledSequence:
    """Split punctuated text into words and per-word punctuation labels."""
    text = normalize_text(text)
    text = re.sub(r"--+", "—", text)
    text = re.sub(r"(?<!\w)-(?!\w)", "—", text)
    text = text.translate({ord(c): " " for c in _STRIP_CHARS})
    text = text.replace("‘", "'").replace("’", "'")

    words: list[str] = []
    labels: list[str] = []
    buffer: list[str] = []

    def flush():
        word = "".join(buffer).strip("'")
        buffer.clear()
        if word:
            words.append(word)
            labels.append("O")

    for token in text.split():
        for i, ch in enumerate(token):
            if ch in _MARK_CLASS:
                # keep decimal separators and the like inside numbers
                if ch in ".,:" and 0 < i < len(token) - 1 and token[i - 1].isdigit() and token[i + 1].isdigit():
                    buffer.append(ch)
                    continue
                flush()
                if words and labels[-1] == "O":
                    labels[-1] = _MARK_CLASS[ch]
            else:
                buffer.append(ch)
        flush()
    if not words:
        raise DataError("text contains no words after normalization")
    return LabeledSequence(tuple(words), tuple(labels), TASK_PUN)


def detokenize(seq: LabeledSequence) -> str:
    """Render words with canonical mark characters appended to labeled words."""
    if seq.task != TASK_PUN:
        raise DataError("detokenize expects punctuation-task sequences")
    pieces = []
    for word, label in zip(seq.words, seq.labels):
        pieces.append(word + _CANONICAL_MARK.get(label, ""))
    return " ".join(pieces)


def strip_marks(text: str) -> list[str]:
    """Just the normalized word stream of a possibly punctuated text."""
    return list(tokenize_and_label(text).words)


def read_pun_corpus(path) -> list[LabeledSequence]:
    """One sentence per line of punctuated UTF-8 text; blank lines skipped."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                out.append(tokenize_and_label(line))
            except DataError as e:
                raise DataError(f"{path}:{lineno}: {e}")
    return out


def write_pun_corpus(path, seqs: Iterable[LabeledSequence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in seqs:
            f.write(detokenize(seq) + "\n")


def read_pos_corpus(path) -> list[LabeledSequence]:
    """Two-column word/tag lines with blank-line sentence boundaries."""
    sequences: list[LabeledSequence] = []
    words: list[str] = []
    tags: list[str] = []

    def flush():
        if words:
            sequences.append(LabeledSequence(tuple(words), tuple(tags), TASK_POS))
            words.clear()
            tags.clear()

    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                flush()
                continue
            columns = line.split()
            if len(columns) != 2:
                raise DataError(f"{path}:{lineno}: expected two columns, got {len(columns)}")
            word, tag = columns
            if tag not in POS_TAG_TO_ID:
                raise DataError(f"{path}:{lineno}: unknown POS tag {tag!r}")
            words.append(normalize_text(word))
            tags.append(tag)
    flush()
    return sequences


def write_pos_corpus(path, seqs: Iterable[LabeledSequence]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for seq in seqs:
            for word, tag in zip(seq.words, seq.labels):
                f.write(f"{word}\t{tag}\n")
            f.write("\n")


class Vocab:
    """Token to id map with pinned PAD/UNK/MASK specials."""

    def __init__(self, tokens: Iterable[str], min_count: int = 1):
        self.tokens = tuple(SPECIAL_TOKENS) + tuple(tokens)
        self.min_count = min_count
        self.index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)

    def encode(self, words: Iterable[str]) -> np.ndarray:
        return np.array([self.id(w) for w in words], dtype=np.int64)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for token in self.tokens[len(SPECIAL_TOKENS):]:
                f.write(token + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
        return cls(tokens)


def build_vocab(corpora: Iterable[Iterable[LabeledSequence]], min_count: int = 1) -> Vocab:
    """Frequency-descending (ties lexicographic) vocabulary over all corpora."""
    counts: dict[str, int] = {}
    for corpus in corpora:
        for seq in corpus:
            for word in seq.words:
                counts[word] = counts.get(word, 0) + 1
    kept = [tok for tok, n in counts.items() if n >= min_count]
    kept.sort(key=lambda tok: (-counts[tok], tok))
    return Vocab(kept, min_count=min_count)


@dataclass
class Batch:
    ids: np.ndarray
    mask: np.ndarray
    labels: np.ndarray
    lengths: np.ndarray
    task: str

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def _split_long(seq: LabeledSequence, max_len: int) -> list[LabeledSequence]:
    if len(seq) <= max_len:
        return [seq]
    return [LabeledSequence(seq.words[i:i + max_len], seq.labels[i:i + max_len], seq.task)
            for i in range(0, len(seq), max_len)]


def make_batches(seqs: list[LabeledSequence], vocab: Vocab, batch_size: int,
                 max_len: int, shuffle_seed: int | None = 0) -> list[Batch]:
    """Seeded shuffle, split at max_len, pad each batch to its longest row."""
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    pieces: list[LabeledSequence] = []
    for seq in seqs:
        pieces.extend(_split_long(seq, max_len))
    order = np.arange(len(pieces))
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(len(pieces))
    batches = []
    for start in range(0, len(pieces), batch_size):
        chunk = [pieces[i] for i in order[start:start + batch_size]]
        lengths = np.array([len(s) for s in chunk], dtype=np.int64)
        width = int(lengths.max())
        ids = np.full((len(chunk), width), PAD_ID, dtype=np.int64)
        labels = np.full((len(chunk), width), LABEL_PAD, dtype=np.int64)
        mask = np.zeros((len(chunk), width), dtype=bool)
        for row, seq in enumerate(chunk):
            ids[row, :len(seq)] = vocab.encode(seq.words)
            labels[row, :len(seq)] = seq.label_ids()
            mask[row, :len(seq)] = True
        batches.append(Batch(ids, mask, labels, lengths, chunk[0].task))
    return batches


# --- synthetic fixture corpus -------------------------------------------------
#
# A tiny probabilistic grammar over a closed lexicon in which every word has
# exactly one POS tag and punctuation placement is a deterministic function
# of the tag pattern: an interjection or a sentence-initial vocative noun is
# followed by COMMA (a sentence-initial adverb is not), a non-final clause
# ends with COMMA, and the final word carries QUESTION if the last clause
# starts with a wh-adverb, PERIOD otherwise. Content words (nouns,
# adjectives, verbs, sentence adverbs) are generated nonce forms sampled
# with a Zipf tail. The vocative-versus-adverb contrast puts a mark decision
# on an open-class word's own identity, so word-class knowledge genuinely
# matters and rare words are genuinely hard.

_CORE_LEXICON = {
    "UH": ["oh", "well", "hey", "yeah", "ah"],
    "PRP": ["i", "you", "he", "she", "it", "we", "they"],
    "WRB": ["where", "when", "why", "how"],
    "DT": ["the", "a", "this", "that", "every", "some"],
    "IN": ["in", "on", "under", "near", "behind"],
    "RB": ["very", "quite", "really", "rather"],
    "VBZ": ["is", "was", "seems", "looks"],
}

_ONSETS = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "bl", "br", "cl", "dr", "fl", "gr", "pl", "sk", "st", "tr"]
_VOWELS = ["a", "e", "i", "o", "u"]
_CODAS = ["n", "m", "r", "l", "s", "t", "k", "p", "nd", "rk", "st", "sh"]


def _nonce_words(count: int, salt: int, taken: set[str]) -> list[str]:
    """Deterministic pool of pronounceable made-up words, disjoint from taken."""
    rng = np.random.default_rng(777 + salt)
    out: list[str] = []
    while len(out) < count:
        syllables = 2 if rng.random() < 0.7 else 3
        word = "".join(
            _ONSETS[rng.integers(len(_ONSETS))] + _VOWELS[rng.integers(len(_VOWELS))]
            for _ in range(syllables)
        ) + _CODAS[rng.integers(len(_CODAS))]
        if word not in taken:
            taken.add(word)
            out.append(word)
    return out


@dataclass(frozen=True)
class SynthGrammar:
    num_nouns: int = 220
    num_adjectives: int = 90
    num_verbs: int = 40
    num_sentence_adverbs: int = 80
    zipf: float = 1.1
    p_interjection: float = 0.12
    p_vocative: float = 0.22
    p_sentence_adverb: float = 0.22
    p_two_clauses: float = 0.25
    p_question: float = 0.35
    p_adjective: float = 0.5

    def lexicon(self) -> dict[str, list[str]]:
        """Word inventories keyed by sampling slot; _sadv shares the RB tag."""
        taken = {w for words in _CORE_LEXICON.values() for w in words}
        lex = {tag: list(words) for tag, words in _CORE_LEXICON.items()}
        lex["NN"] = _nonce_words(self.num_nouns, 0, taken)
        lex["JJ"] = _nonce_words(self.num_adjectives, 1, taken)
        lex["VBZ"] = lex["VBZ"] + _nonce_words(self.num_verbs, 2, taken)
        lex["_sadv"] = _nonce_words(self.num_sentence_adverbs, 3, taken)
        return lex

    def _zipf_pick(self, rng: np.random.Generator, words: list[str]) -> str:
        weights = 1.0 / np.power(np.arange(1, len(words) + 1), self.zipf)
        return words[rng.choice(len(words), p=weights / weights.sum())]

    def sample(self, rng: np.random.Generator,
               lexicon: dict[str, list[str]] | None = None):
        """One sentence: (words, pos_tags, punctuation_labels)."""
        lex = lexicon if lexicon is not None else self.lexicon()
        words: list[str] = []
        tags: list[str] = []
        marks: list[str] = []

        def emit(slot: str, tag: str | None = None):
            words.append(self._zipf_pick(rng, lex[slot]))
            tags.append(tag or slot)
            marks.append("O")

        def noun_phrase():
            emit("DT")
            if rng.random() < self.p_adjective:
                emit("JJ")
            emit("NN")

        def clause() -> bool:
            interrogative = rng.random() < self.p_question
            if interrogative:
                emit("WRB")
                emit("VBZ")
                if rng.random() < 0.3:
                    emit("PRP")
                else:
                    noun_phrase()
            else:
                pattern = rng.integers(4)
                if pattern == 0:
                    emit("PRP")
                    emit("VBZ")
                    noun_phrase()
                elif pattern == 1:
                    emit("DT")
                    emit("NN")
                    emit("VBZ")
                    emit("JJ")
                elif pattern == 2:
                    emit("DT")
                    emit("NN")
                    emit("VBZ")
                    emit("IN")
                    noun_phrase()
                else:
                    emit("PRP")
                    emit("VBZ")
                    emit("RB")
                    emit("JJ")
            return interrogative

        # sentence prefix: interjection and vocative take a comma, a plain
        # sentence adverb does not; which one it is can only be read off the
        # word itself
        roll = rng.random()
        if roll < self.p_interjection:
            emit("UH")
            marks[-1] = "COMMA"
        elif roll < self.p_interjection + self.p_vocative:
            emit("NN")
            marks[-1] = "COMMA"
        elif roll < self.p_interjection + self.p_vocative + self.p_sentence_adverb:
            emit("_sadv", "RB")
        clauses = 2 if rng.random() < self.p_two_clauses else 1
        last_interrogative = False
        for c in range(clauses):
            last_interrogative = clause()
            if c < clauses - 1:
                marks[-1] = "COMMA"
        marks[-1] = "QUESTION" if last_interrogative else "PERIOD"
        return tuple(words), tuple(tags), tuple(marks)

    def expected_label_rates(self) -> dict[str, float]:
        """Expected per-sentence counts of each mark."""
        return {
            "COMMA": self.p_interjection + self.p_vocative + self.p_two_clauses,
            "PERIOD": 1.0 - self.p_question,
            "QUESTION": self.p_question,
        }

    def label_count_variances(self) -> dict[str, float]:
        prefix = self.p_interjection + self.p_vocative
        pt, pq = self.p_two_clauses, self.p_question
        return {
            "COMMA": prefix * (1 - prefix) + pt * (1 - pt),
            "PERIOD": pq * (1 - pq),
            "QUESTION": pq * (1 - pq),
        }


def synth_corpus(seed: int, size: int, grammar: SynthGrammar | None = None
                 ) -> tuple[list[LabeledSequence], list[LabeledSequence]]:
    """Paired corpora from one seeded stream: `size` punctuation sentences
    followed by `size` disjoint POS sentences."""
    if size < 1:
        raise DataError(f"size must be >= 1, got {size}")
    grammar = grammar or SynthGrammar()
    lexicon = grammar.lexicon()
    rng = np.random.default_rng(seed)
    pun = []
    for _ in range(size):
        words, _tags, labels = grammar.sample(rng, lexicon)
        pun.append(LabeledSequence(words, labels, TASK_PUN))
    pos = []
    for _ in range(size):
        words, tags, _labels = grammar.sample(rng, lexicon)
        pos.append(LabeledSequence(words, tags, TASK_POS))
    return pun, pos
