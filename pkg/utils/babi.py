"""Synthetic bAbI-style "Where is X?" stories.

A story mixes location events ("mary moved to the kitchen") with distractor
sentences.  One event is the target: the queried person moves to the answer
place at a uniformly drawn position, and nothing after it moves that person
again, so the answer is always the person's last stated location.
"""

import hashlib
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from core.errors import ParameterError, SequenceOverflowError

logger = logging.getLogger(__name__)

PAD, UNK, SEP = 0, 1, 2
RESERVED_TOKENS = ("<pad>", "<unk>", "<sep>")

LOCATION_VERBS = ("moved", "went", "journeyed", "travelled")
LOCATION_TEMPLATE = "{name} {verb} to the {place}"
QUESTION_TEMPLATE = "Where is {name}?"

DEFAULT_NAMES = ["Mary", "John", "Sandra", "Daniel"]
DEFAULT_PLACES = ["kitchen", "garden", "office", "bathroom", "hallway", "bedroom"]
DEFAULT_DISTRACTORS = [
    "{name} picked up the milk",
    "{name} dropped the apple",
    "{name} grabbed the football",
    "{name} is tired",
    "{name} yawned",
    "{name} is hungry",
    "{name} sang a song",
    "{name} read a book",
]

_TOKEN_RE = re.compile(r"[^\W_]+")   # unicode letters and digits
_EVENT_RE = re.compile(r"^(\w+) (?:%s) to the (\w+)$" % "|".join(LOCATION_VERBS))


@dataclass
class StoryConfig:
    names: List[str] = field(default_factory=lambda: list(DEFAULT_NAMES))
    places: List[str] = field(default_factory=lambda: list(DEFAULT_PLACES))
    distractor_templates: List[str] = field(default_factory=lambda: list(DEFAULT_DISTRACTORS))
    min_sentences: int = 8
    max_sentences: int = 12
    max_tokens: int = 60
    location_ratio: float = 0.5
    seed: int = 0

    def validate(self) -> "StoryConfig":
        if not self.names or not self.places:
            raise ParameterError("story rosters need at least one name and one place")
        if not self.distractor_templates:
            raise ParameterError("at least one distractor template is required")
        if not 1 <= self.min_sentences <= self.max_sentences:
            raise ParameterError(
                f"sentence range [{self.min_sentences}, {self.max_sentences}] is invalid")
        if not 0.0 <= self.location_ratio <= 1.0:
            raise ParameterError(f"location_ratio must lie in [0, 1], got {self.location_ratio}")
        longest_event = max(len(tokenize_words(LOCATION_TEMPLATE.format(name=n, verb=v, place=p)))
                            for n in self.names for v in LOCATION_VERBS for p in self.places)
        question = max(len(tokenize_words(QUESTION_TEMPLATE.format(name=n))) for n in self.names)
        if longest_event + 1 + question > self.max_tokens:
            raise ParameterError(f"max_tokens={self.max_tokens} cannot hold even a one-sentence story")
        return self

    def to_dict(self) -> Dict:
        return asdict(self)


@dataclass
class StorySample:
    index: int
    sentences: List[str]
    question: str
    person: str
    answer: int                 # index into StoryConfig.places
    answer_text: str
    answer_position: int        # sentence index of the target event
    token_ids: List[int] = field(default_factory=list)

    def to_json(self) -> Dict:
        return {"sentences": self.sentences, "question": self.question,
                "answer": self.answer_text, "answer_id": self.answer,
                "token_ids": self.token_ids}


class Vocab:
    """Token <-> id mapping with PAD=0, UNK=1, SEP=2 reserved."""

    def __init__(self, tokens: Iterable[str] = ()):
        self.id_to_token: List[str] = list(RESERVED_TOKENS)
        self.token_to_id: Dict[str, int] = {t: i for i, t in enumerate(RESERVED_TOKENS)}
        for token in tokens:
            self.add(token)

    def add(self, token: str) -> int:
        if token not in self.token_to_id:
            self.token_to_id[token] = len(self.id_to_token)
            self.id_to_token.append(token)
        return self.token_to_id[token]

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.id_to_token[i] for i in ids if i != PAD]

    @classmethod
    def for_config(cls, cfg: StoryConfig) -> "Vocab":
        """Every word the generator can emit, in order of first occurrence."""
        texts: List[str] = []
        for name in cfg.names:
            texts.append(QUESTION_TEMPLATE.format(name=name))
            for verb in LOCATION_VERBS:
                for place in cfg.places:
                    texts.append(LOCATION_TEMPLATE.format(name=name, verb=verb, place=place))
            for template in cfg.distractor_templates:
                texts.append(template.format(name=name))
        vocab = cls()
        for text in texts:
            for word in tokenize_words(text):
                vocab.add(word)
        return vocab


def tokenize_words(text: str) -> List[str]:
    """Lowercase and split on whitespace and punctuation."""
    return _TOKEN_RE.findall(text.lower())


def tokenize(text: str, vocab: Vocab, max_tokens: int, sample: str = "<text>") -> List[int]:
    ids = [vocab.lookup(w) for w in tokenize_words(text)]
    return _pad(ids, max_tokens, sample)


def encode_sample(sentences: Sequence[str], question: str, vocab: Vocab,
                  max_tokens: int, sample: str = "<sample>") -> List[int]:
    """Story tokens, then SEP, then question tokens, right-padded with PAD."""
    ids = [vocab.lookup(w) for s in sentences for w in tokenize_words(s)]
    ids.append(SEP)
    ids.extend(vocab.lookup(w) for w in tokenize_words(question))
    return _pad(ids, max_tokens, sample)


def _pad(ids: List[int], max_tokens: int, sample: str) -> List[int]:
    if len(ids) > max_tokens:
        raise SequenceOverflowError(sample, len(ids), max_tokens)
    return ids + [PAD] * (max_tokens - len(ids))


def generate_story(cfg: StoryConfig, index: int, vocab: Optional[Vocab] = None) -> StorySample:
    """Deterministic story for (cfg.seed, index)."""
    cfg.validate()
    vocab = vocab or Vocab.for_config(cfg)
    rng = np.random.default_rng([cfg.seed, index])

    person = cfg.names[rng.integers(len(cfg.names))]
    answer = int(rng.integers(len(cfg.places)))
    count = int(rng.integers(cfg.min_sentences, cfg.max_sentences + 1))
    target_slot = int(rng.integers(count))

    question = QUESTION_TEMPLATE.format(name=person)
    target = LOCATION_TEMPLATE.format(name=person, verb=LOCATION_VERBS[rng.integers(len(LOCATION_VERBS))],
                                      place=cfg.places[answer])
    budget = cfg.max_tokens - 1 - _length(question) - _length(target)
    shortest = min(cfg.distractor_templates, key=lambda t: _length(t.format(name="")))

    sentences: List[str] = []
    answer_position = -1
    for slot in range(count):
        if slot == target_slot:
            answer_position = len(sentences)
            sentences.append(target)
            continue
        sentence = _filler(cfg, rng, person, after_target=answer_position >= 0)
        if _length(sentence) > budget:
            # out of room: fall back to the shortest distractor, or drop the slot
            sentence = shortest.format(name=cfg.names[rng.integers(len(cfg.names))])
            if _length(sentence) > budget:
                continue
        sentences.append(sentence)
        budget -= _length(sentence)

    token_ids = encode_sample(sentences, question, vocab, cfg.max_tokens, f"story {index}")
    return StorySample(index, sentences, question, person, answer, cfg.places[answer],
                       answer_position, token_ids)


def _length(text: str) -> int:
    return len(tokenize_words(text))


def _filler(cfg: StoryConfig, rng: np.random.Generator, person: str, after_target: bool) -> str:
    if rng.random() < cfg.location_ratio:
        others = [n for n in cfg.names if n != person] if after_target else list(cfg.names)
        if others:
            return LOCATION_TEMPLATE.format(name=others[rng.integers(len(others))],
                                            verb=LOCATION_VERBS[rng.integers(len(LOCATION_VERBS))],
                                            place=cfg.places[rng.integers(len(cfg.places))])
    template = cfg.distractor_templates[rng.integers(len(cfg.distractor_templates))]
    return template.format(name=cfg.names[rng.integers(len(cfg.names))])


def reparse_answer(sentences: Sequence[str], question: str) -> Optional[str]:
    """Independent reader: the queried person's last stated location, if any."""
    match = re.match(r"^where is (\w+)\??$", question.strip().lower())
    if not match:
        return None
    person, last = match.group(1), None
    for sentence in sentences:
        event = _EVENT_RE.match(sentence.strip().lower())
        if event and event.group(1) == person:
            last = event.group(2)
    return last


def is_train_index(index: int, seed: int = 0, train_fraction: float = 0.8) -> bool:
    """Split membership decided by a hash of the sample index, not by order."""
    digest = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little") / 2 ** 64 < train_fraction


def split_indices(count: int, seed: int = 0, train_fraction: float = 0.8) -> Tuple[List[int], List[int]]:
    train, val = [], []
    for i in range(count):
        (train if is_train_index(i, seed, train_fraction) else val).append(i)
    return train, val


def generate_dataset(cfg: StoryConfig, count: int) -> Tuple[List[StorySample], Vocab]:
    vocab = Vocab.for_config(cfg)
    samples = [generate_story(cfg, i, vocab) for i in range(count)]
    logger.debug("generated %d stories with seed %d (vocab %d)", count, cfg.seed, len(vocab))
    return samples, vocab


def write_jsonl(samples: Iterable[StorySample], path: Union[str, Path]) -> int:
    written = 0
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample.to_json(), ensure_ascii=False) + "\n")
            written += 1
    logger.info("wrote %d stories to %s", written, path)
    return written
