"""Tokenized prompts for the five training tasks.

Every prompt has the shape::

    BOS m_1 .. m_n TASK <task> [ARGUMENTS <arg>] START <target> EOS

The ARGUMENTS block is present for the rating, movie-by-genre and
movie-by-rating tasks.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .dataset import Corpus, InteractionSequence, Vocabulary

__all__ = [
    "TaskKind",
    "TrainingExample",
    "PromptError",
    "ALL_TASKS",
    "SINGLE_TASK",
    "make_example",
    "make_prompt",
    "enumerate_training_set",
    "validation_examples",
    "parse_prompt",
]


class PromptError(ValueError):
    pass


class TaskKind(enum.Enum):
    MOVIE = "RECOMMEND"
    GENRE = "RECOMMEND_GENRE"
    RATING = "RATE_MOVIE"
    MOVIE_BY_GENRE = "MOVIE_BY_GENRE"
    MOVIE_BY_RATING = "RECOMMEND_RATING"

    @property
    def token_label(self) -> str:
        return self.value

    @property
    def has_argument(self) -> bool:
        return self in (TaskKind.RATING, TaskKind.MOVIE_BY_GENRE, TaskKind.MOVIE_BY_RATING)


ALL_TASKS: tuple[TaskKind, ...] = tuple(TaskKind)
SINGLE_TASK: tuple[TaskKind, ...] = (TaskKind.MOVIE,)


@dataclass(frozen=True)
class TrainingExample:
    tokens: tuple[int, ...]
    loss_mask: tuple[int, ...]
    task: TaskKind
    user_id: int

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def target(self) -> int:
        return self.tokens[-2]


def _task_suffix(
    seq: InteractionSequence,
    task: TaskKind,
    target_index: int,
    vocab: Vocabulary,
    genres: dict[int, tuple[str, ...]] | None,
    rng: np.random.Generator | None,
) -> tuple[list[int], int]:
    """Tokens from TASK through START, and the target token."""
    movie = seq.movie_ids[target_index]
    rating = seq.ratings[target_index]

    def pick_genre() -> int:
        options = (genres or {}).get(movie)
        if not options:
            raise PromptError(f"target movie {movie} has no genre")
        i = 0 if rng is None or len(options) == 1 else int(rng.integers(len(options)))
        return vocab.genre_token(options[i])

    head = [vocab.TASK, vocab.id(task.token_label)]
    if task is TaskKind.MOVIE:
        return head + [vocab.START], vocab.movie_token(movie)
    if task is TaskKind.GENRE:
        return head + [vocab.START], pick_genre()
    if task is TaskKind.RATING:
        arg, target = vocab.movie_token(movie), vocab.rating_token(rating)
    elif task is TaskKind.MOVIE_BY_GENRE:
        arg, target = pick_genre(), vocab.movie_token(movie)
    else:
        arg, target = vocab.rating_token(rating), vocab.movie_token(movie)
    return head + [vocab.ARGUMENTS, arg, vocab.START], target


def _history(
    seq: InteractionSequence, target_index: int, budget: int, vocab: Vocabulary, end_ok: bool = False
):
    if not 0 < target_index < len(seq) + end_ok:
        raise PromptError(
            f"user {seq.user_id}: target index {target_index} leaves no history "
            f"(sequence length {len(seq)})"
        )
    if budget < 1:
        raise PromptError("context length too small for a one-item history")
    start = max(0, target_index - budget)
    return [vocab.movie_token(m) for m in seq.movie_ids[start:target_index]]


def make_example(
    seq: InteractionSequence,
    task: TaskKind,
    target_index: int,
    vocab: Vocabulary,
    genres: dict[int, tuple[str, ...]] | None = None,
    context_length: int = 200,
    rng: np.random.Generator | None = None,
    full_loss: bool = False,
) -> TrainingExample:
    """Build one example whose target is the item at ``target_index``.

    History is the items strictly before ``target_index``, oldest dropped
    first so the whole example fits in ``context_length`` tokens. ``genres``
    maps movie id to its genres; multi-genre targets take one genre drawn
    from ``rng`` (the first genre when ``rng`` is None).

    The loss mask marks the target and the closing EOS; ``full_loss`` marks
    every token after BOS instead.
    """
    suffix, target = _task_suffix(seq, task, target_index, vocab, genres, rng)
    fixed = 1 + len(suffix) + 2
    hist = _history(seq, target_index, context_length - fixed, vocab)
    tokens = [vocab.BOS] + hist + suffix + [target, vocab.EOS]
    if full_loss:
        mask = [0] + [1] * (len(tokens) - 1)
    else:
        mask = [0] * (len(tokens) - 2) + [1, 1]
    return TrainingExample(tuple(tokens), tuple(mask), task, seq.user_id)


def make_prompt(
    seq: InteractionSequence,
    target_index: int,
    vocab: Vocabulary,
    context_length: int = 200,
) -> list[int]:
    """Movie-task prompt ending at START, for ranking the next token.

    ``target_index == len(seq)`` uses the whole history (a fresh recommendation).
    """
    hist = _history(seq, target_index, context_length - 4, vocab, end_ok=True)
    return [vocab.BOS] + hist + [vocab.TASK, vocab.RECOMMEND, vocab.START]


def movie_genres(corpus: Corpus) -> dict[int, tuple[str, ...]]:
    return {mid: m.genres for mid, m in corpus.movies.items()}


def enumerate_training_set(
    corpus: Corpus,
    tasks: Iterable[TaskKind],
    seed: int,
    epoch: int = 0,
    context_length: int = 200,
    full_loss: bool = False,
) -> Iterator[TrainingExample]:
    """One example per (user, task), targets at the train split, seeded order.

    The order and any genre draws depend only on ``(seed, epoch)``.
    """
    tasks = tuple(dict.fromkeys(tasks))
    if not tasks:
        raise ValueError("at least one task is required")
    rng = np.random.default_rng([seed, epoch])
    genres = movie_genres(corpus)
    pairs = [(s, t) for s in corpus.sequences for t in tasks]
    order = rng.permutation(len(pairs))
    for i in order:
        seq, task = pairs[i]
        yield make_example(
            seq, task, seq.train_target_index, corpus.vocab, genres, context_length, rng, full_loss
        )


def validation_examples(
    corpus: Corpus, split: str = "val", context_length: int = 200
) -> list[TrainingExample]:
    """Movie-task examples for every user at the given split, in user order."""
    genres = movie_genres(corpus)
    return [
        make_example(s, TaskKind.MOVIE, s.split_index(split), corpus.vocab, genres, context_length)
        for s in corpus.sequences
    ]


@dataclass(frozen=True)
class ParsedPrompt:
    history: tuple[int, ...]
    task: TaskKind
    argument: int | None
    target: int


def parse_prompt(tokens, vocab: Vocabulary) -> ParsedPrompt:
    """Validate ``tokens`` against the prompt grammar; raise PromptError if not."""
    toks = list(tokens)

    def fail(msg):
        raise PromptError(f"{msg}: {[vocab.label(t) if 0 <= t < len(vocab) else t for t in toks]}")

    if len(toks) < 7 or toks[0] != vocab.BOS or toks[-1] != vocab.EOS:
        fail("prompt must start with BOS, end with EOS and have at least 7 tokens")
    i = 1
    while i < len(toks) and vocab.is_movie(toks[i]):
        i += 1
    history = tuple(toks[1:i])
    if not history:
        fail("empty history")
    if i + 1 >= len(toks) or toks[i] != vocab.TASK or not vocab.is_task(toks[i + 1]):
        fail("expected TASK <task>")
    task = TaskKind(vocab.label(toks[i + 1]))
    i += 2
    arg = None
    if task.has_argument:
        if i + 1 >= len(toks) or toks[i] != vocab.ARGUMENTS:
            fail("expected ARGUMENTS <arg>")
        arg = toks[i + 1]
        want = {
            TaskKind.RATING: vocab.is_movie,
            TaskKind.MOVIE_BY_GENRE: vocab.is_genre,
            TaskKind.MOVIE_BY_RATING: vocab.is_rating,
        }[task]
        if not want(arg):
            fail(f"argument of wrong kind for {task.name}")
        i += 2
    if len(toks) != i + 3 or toks[i] != vocab.START:
        fail("expected START <target> EOS")
    target = toks[i + 1]
    check = {
        TaskKind.MOVIE: vocab.is_movie,
        TaskKind.GENRE: vocab.is_genre,
        TaskKind.RATING: vocab.is_rating,
        TaskKind.MOVIE_BY_GENRE: vocab.is_movie,
        TaskKind.MOVIE_BY_RATING: vocab.is_movie,
    }[task]
    if not check(target):
        fail(f"target of wrong kind for {task.name}")
    return ParsedPrompt(history, task, arg, target)
