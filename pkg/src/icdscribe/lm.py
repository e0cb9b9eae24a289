"""Interpolated n-gram language model over ICD description text.

Probabilities mix maximum-likelihood estimates of every order 1..n with
nonnegative weights summing to one.  Orders whose context never occurred
in training contribute nothing; their weight is redistributed
proportionally across the orders that did see the context, so the
conditional distribution stays proper.  A tiny floor keeps every
vocabulary word (and the unknown-word token) strictly positive.

Sentence starts are padded with an internal start marker so that short
contexts near the beginning are still well defined.  There is no
end-of-sentence token at this level: the model scores word sequences,
and sequence termination is the decoder's concern.
"""

import json
import math
from dataclasses import dataclass, field

from .errors import ContractError, ParseError

SOS_MARKER = "<sos>"
UNK_WORD = "<unk>"

# floor added to unigram probabilities before renormalization
_FLOOR = 1e-10

_STRIP_CHARS = str.maketrans({",": " ", ";": " ", "-": " ", "–": " ", "—": " "})


def normalize_line(text):
    """Lowercase and split, with commas, dashes and semicolons removed."""
    return text.translate(_STRIP_CHARS).lower().split()


@dataclass
class Corpus:
    sentences: list

    @classmethod
    def from_lines(cls, lines):
        sentences = [words for words in (normalize_line(ln) for ln in lines) if words]
        return cls(sentences)

    @property
    def unique_words(self):
        return len({w for s in self.sentences for w in s})

    @property
    def total_words(self):
        return sum(len(s) for s in self.sentences)


@dataclass
class NGramCounts:
    """Per-order gram counts plus totals for each distinct context."""

    max_order: int
    grams: list = field(default_factory=list)  # grams[k-1]: {(context..., word): count}
    context_totals: list = field(default_factory=list)  # context_totals[k-1]: {context: count}

    @classmethod
    def from_corpus(cls, corpus, max_order):
        grams = [{} for _ in range(max_order)]
        totals = [{} for _ in range(max_order)]
        for sentence in corpus.sentences:
            for i, word in enumerate(sentence):
                for k in range(1, max_order + 1):
                    context = _padded_context(sentence[:i], k - 1)
                    key = context + (word,)
                    grams[k - 1][key] = grams[k - 1].get(key, 0) + 1
                    totals[k - 1][context] = totals[k - 1].get(context, 0) + 1
        return cls(max_order, grams, totals)


def _padded_context(history, length):
    """Last `length` history words, left-padded with the start marker."""
    if length == 0:
        return ()
    tail = tuple(history[-length:])
    return (SOS_MARKER,) * (length - len(tail)) + tail


@dataclass
class InterpolatedLM:
    max_order: int
    counts: NGramCounts
    lambdas: list
    vocabulary: frozenset

    def __post_init__(self):
        if len(self.lambdas) != self.max_order:
            raise ContractError(
                f"{self.max_order} orders need {self.max_order} weights, got {len(self.lambdas)}"
            )
        if any(lam < 0 for lam in self.lambdas):
            raise ContractError("interpolation weights must be nonnegative")
        if abs(sum(self.lambdas) - 1.0) > 1e-12:
            raise ContractError(f"interpolation weights sum to {sum(self.lambdas)}, expected 1")


def train_lm(corpus, max_order, lambdas=None):
    if max_order < 1:
        raise ContractError(f"max order must be at least 1, got {max_order}")
    if not corpus.sentences:
        raise ContractError("cannot train a language model on an empty corpus")
    if lambdas is None:
        lambdas = [1.0 / max_order] * max_order
    counts = NGramCounts.from_corpus(corpus, max_order)
    vocab = frozenset(w for s in corpus.sentences for w in s) | {UNK_WORD}
    return InterpolatedLM(max_order, counts, list(lambdas), vocab)


def _floored_unigram(lm, word):
    total = lm.counts.context_totals[0][()]
    count = lm.counts.grams[0].get((word,), 0)
    return (count / total + _FLOOR) / (1.0 + _FLOOR * len(lm.vocabulary))


def prob(lm, word, history):
    """Interpolated conditional probability of `word` after `history`.

    Only the last max_order-1 history words matter.  Words outside the
    vocabulary are scored as the unknown-word token.
    """
    if word not in lm.vocabulary:
        word = UNK_WORD
    history = list(history)[-(lm.max_order - 1):] if lm.max_order > 1 else []

    estimates = []  # (lambda_k, p_k) for orders whose context was seen
    for k in range(1, lm.max_order + 1):
        if k == 1:
            estimates.append((lm.lambdas[0], _floored_unigram(lm, word)))
            continue
        context = _padded_context(history, k - 1)
        total = lm.counts.context_totals[k - 1].get(context)
        if total is None:
            continue
        count = lm.counts.grams[k - 1].get(context + (word,), 0)
        estimates.append((lm.lambdas[k - 1], count / total))

    weight = sum(lam for lam, _ in estimates)
    if weight <= 0.0:
        # every weighted order missed its context; fall back to the unigram
        return _floored_unigram(lm, word)
    return sum(lam * p for lam, p in estimates) / weight


def sentence_logprob(lm, sentence):
    """Log probability of a word sequence under the chain rule."""
    words = list(sentence)
    if not words:
        raise ContractError("cannot score an empty sentence")
    return sum(math.log(prob(lm, w, words[:i])) for i, w in enumerate(words))


def perplexity(lm, sentences):
    """exp of the mean negative log probability per word."""
    total_logprob = 0.0
    total_words = 0
    for sentence in sentences:
        total_logprob += sentence_logprob(lm, sentence)
        total_words += len(sentence)
    if total_words == 0:
        raise ContractError("perplexity needs at least one word")
    return math.exp(-total_logprob / total_words)


def sample_next(lm, history, rng):
    """Draw the next word from the conditional distribution.

    Iterates the vocabulary in sorted order so identical rng states give
    identical draws.
    """
    words = sorted(lm.vocabulary)
    probs = [prob(lm, w, history) for w in words]
    mass = sum(probs)
    threshold = rng.random() * mass
    cumulative = 0.0
    for w, p in zip(words, probs):
        cumulative += p
        if threshold < cumulative:
            return w
    return words[-1]


def save_lm(lm, path):
    """Serialize to the versioned lm-v1 structured-text format."""
    orders = []
    for k in range(1, lm.max_order + 1):
        entries = sorted(lm.counts.grams[k - 1].items())
        orders.append({"order": k, "counts": [[list(gram), c] for gram, c in entries]})
    payload = {
        "format": "lm-v1",
        "max_order": lm.max_order,
        "lambdas": lm.lambdas,
        "vocabulary": sorted(lm.vocabulary),
        "orders": orders,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_lm(path):
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "lm-v1":
        raise ParseError(f"unsupported language model format {payload.get('format')!r}")
    max_order = payload["max_order"]
    grams = [{} for _ in range(max_order)]
    totals = [{} for _ in range(max_order)]
    for block in payload["orders"]:
        k = block["order"]
        for gram, count in block["counts"]:
            key = tuple(gram)
            grams[k - 1][key] = count
            context = key[:-1]
            totals[k - 1][context] = totals[k - 1].get(context, 0) + count
    counts = NGramCounts(max_order, grams, totals)
    return InterpolatedLM(
        max_order, counts, list(payload["lambdas"]), frozenset(payload["vocabulary"])
    )
