"""MovieLens ingestion, per-user sequences, leave-one-out splits, vocabulary.

Input files use the MovieLens-10M ``.dat`` layout::

    ratings.dat   UserID::MovieID::Rating::Timestamp
    movies.dat    MovieID::Title::Genre1|Genre2|...

The prepared corpus is written as line-oriented JSON (see :func:`save_corpus`).
"""

from __future__ import annotations

import hashlib
import io
import json
from collections import defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

__all__ = [
    "ParseError",
    "DatasetError",
    "CorpusFormatError",
    "RawInteraction",
    "MovieRecord",
    "InteractionSequence",
    "Vocabulary",
    "Corpus",
    "RATING_VALUES",
    "STRUCTURAL_TOKENS",
    "TASK_TOKENS",
    "UNKNOWN_GENRE",
    "MIN_INTERACTIONS",
    "MAX_SEQUENCE_LENGTH",
    "parse_ratings",
    "parse_movies",
    "build_sequences",
    "build_vocabulary",
    "build_corpus",
    "save_corpus",
    "load_corpus",
    "dumps_corpus",
    "loads_corpus",
]

RATING_VALUES: tuple[float, ...] = tuple(i / 2 for i in range(1, 11))
STRUCTURAL_TOKENS = ("PAD", "BOS", "EOS", "TASK", "ARGUMENTS", "START")
TASK_TOKENS = ("RECOMMEND", "RECOMMEND_GENRE", "RATE_MOVIE", "MOVIE_BY_GENRE", "RECOMMEND_RATING")
UNKNOWN_GENRE = "UNKNOWN_GENRE"
MIN_INTERACTIONS = 5
MAX_SEQUENCE_LENGTH = 200

CORPUS_FORMAT = "lsrec-corpus"
CORPUS_VERSION = 1


class ParseError(ValueError):
    """A malformed input line. ``lineno`` is 1-based."""

    def __init__(self, message: str, lineno: int | None = None, source: str | None = None):
        self.lineno = lineno
        self.source = source
        where = [source] if source is not None else []
        if lineno is not None:
            where.append(f"line {lineno}")
        super().__init__(f"{':'.join(where)}: {message}" if where else message)


class DatasetError(ValueError):
    pass


class CorpusFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RawInteraction:
    user_id: int
    movie_id: int
    rating: float
    timestamp: int


@dataclass(frozen=True)
class MovieRecord:
    movie_id: int
    title: str
    genres: tuple[str, ...]


@dataclass(frozen=True)
class InteractionSequence:
    """One user's history, oldest first, with leave-one-out target indices."""

    user_id: int
    movie_ids: tuple[int, ...]
    ratings: tuple[float, ...]
    timestamps: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.movie_ids)

    @property
    def test_target_index(self) -> int:
        return len(self.movie_ids) - 1

    @property
    def val_target_index(self) -> int:
        return len(self.movie_ids) - 2

    @property
    def train_target_index(self) -> int:
        return len(self.movie_ids) - 3

    def split_index(self, split: str) -> int:
        try:
            return {
                "train": self.train_target_index,
                "val": self.val_target_index,
                "test": self.test_target_index,
            }[split]
        except KeyError:
            raise ValueError(f"unknown split {split!r}") from None


def _rating(text: str) -> float:
    value = float(text)
    if value not in RATING_VALUES:
        raise ValueError(f"rating {text!r} is not a half-star value in 0.5..5.0")
    return value


def _lines(stream) -> Iterable[str]:
    if isinstance(stream, str):
        return stream.splitlines()
    return stream


def parse_ratings(stream, source: str | None = None) -> list[RawInteraction]:
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines (blank lines skipped)."""
    out = []
    for lineno, line in enumerate(_lines(stream), 1):
        line = line.strip()
        if not line:
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(f"expected 4 '::'-separated fields, got {len(parts)}", lineno, source)
        try:
            user, movie = int(parts[0]), int(parts[1])
            rating = _rating(parts[2])
            ts = int(parts[3])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
        if ts < 0:
            raise ParseError(f"negative timestamp {ts}", lineno, source)
        out.append(RawInteraction(user, movie, rating, ts))
    return out


def parse_movies(stream, source: str | None = None) -> list[MovieRecord]:
    """Parse ``MovieID::Title::Genres`` lines.

    Genres are de-duplicated preserving first occurrence. An empty genre field
    yields ``(UNKNOWN_GENRE,)``. Titles containing ``::`` are not supported, as
    in the upstream format.
    """
    out = []
    seen: set[int] = set()
    for lineno, line in enumerate(_lines(stream), 1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        parts = line.split("::")
        if len(parts) != 3:
            raise ParseError(f"expected 3 '::'-separated fields, got {len(parts)}", lineno, source)
        try:
            movie_id = int(parts[0])
        except ValueError as exc:
            raise ParseError(str(exc), lineno, source) from None
        if movie_id in seen:
            raise ParseError(f"duplicate movie id {movie_id}", lineno, source)
        seen.add(movie_id)
        genres = tuple(dict.fromkeys(g.strip() for g in parts[2].split("|") if g.strip()))
        out.append(MovieRecord(movie_id, parts[1], genres or (UNKNOWN_GENRE,)))
    return out


def build_sequences(
    interactions: Iterable[RawInteraction],
    movies: Iterable[MovieRecord] | Mapping[int, MovieRecord],
    min_length: int = MIN_INTERACTIONS,
    max_length: int = MAX_SEQUENCE_LENGTH,
) -> list[InteractionSequence]:
    """Group by user, order by (timestamp, movie_id), filter and truncate.

    Users with fewer than ``min_length`` interactions are dropped first; longer
    histories then keep their most recent ``max_length`` items. Output is
    ordered by user id.
    """
    known = set(movies.keys() if isinstance(movies, Mapping) else (m.movie_id for m in movies))
    per_user: dict[int, list[RawInteraction]] = defaultdict(list)
    for it in interactions:
        if it.movie_id not in known:
            raise DatasetError(f"interaction references unknown movie id {it.movie_id}")
        per_user[it.user_id].append(it)
    out = []
    for user in sorted(per_user):
        items = per_user[user]
        if len(items) < min_length:
            continue
        items.sort(key=lambda r: (r.timestamp, r.movie_id))
        items = items[-max_length:]
        out.append(
            InteractionSequence(
                user,
                tuple(r.movie_id for r in items),
                tuple(r.rating for r in items),
                tuple(r.timestamp for r in items),
            )
        )
    return out


def _rating_label(value: float) -> str:
    return f"RATING_{value:.1f}"


def _genre_label(genre: str) -> str:
    return f"GENRE_{genre}"


def _movie_label(movie_id: int) -> str:
    return f"M{movie_id}"


class Vocabulary:
    """Token table laid out in contiguous segments.

    Order: structural, task, genre (lexicographic), rating (ascending),
    movie (ascending id). Segment membership is a range check.
    """

    def __init__(self, genres: Iterable[str], movie_ids: Iterable[int]):
        self.genres: tuple[str, ...] = tuple(sorted(set(genres)))
        ids = list(movie_ids)
        if len(set(ids)) != len(ids):
            raise DatasetError("movie ids must be unique")
        self.movie_ids: tuple[int, ...] = tuple(sorted(ids))
        labels = list(STRUCTURAL_TOKENS) + list(TASK_TOKENS)
        self.genre_start = len(labels)
        labels += [_genre_label(g) for g in self.genres]
        self.rating_start = len(labels)
        labels += [_rating_label(r) for r in RATING_VALUES]
        self.movie_start = len(labels)
        labels += [_movie_label(m) for m in self.movie_ids]
        self.labels: tuple[str, ...] = tuple(labels)
        self._index = {lab: i for i, lab in enumerate(labels)}
        if len(self._index) != len(labels):
            raise DatasetError("vocabulary labels collide")
        self._movie_index = {m: self.movie_start + i for i, m in enumerate(self.movie_ids)}
        self._genre_index = {g: self.genre_start + i for i, g in enumerate(self.genres)}

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.labels == other.labels

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)}, genres={len(self.genres)}, movies={self.num_movies})"

    @property
    def num_movies(self) -> int:
        return len(self.movie_ids)

    def id(self, label: str) -> int:
        return self._index[label]

    def label(self, token_id: int) -> str:
        return self.labels[token_id]

    def __getattr__(self, name: str) -> int:
        # PAD, BOS, TASK, RECOMMEND, ... as attributes
        if name in STRUCTURAL_TOKENS or name in TASK_TOKENS:
            return self._index[name]
        raise AttributeError(name)

    def movie_token(self, movie_id: int) -> int:
        return self._movie_index[movie_id]

    def genre_token(self, genre: str) -> int:
        return self._genre_index[genre]

    def rating_token(self, rating: float) -> int:
        return self.rating_start + RATING_VALUES.index(rating)

    def token_movie_id(self, token_id: int) -> int:
        if not self.is_movie(token_id):
            raise ValueError(f"token {token_id} is not a movie token")
        return self.movie_ids[token_id - self.movie_start]

    def is_movie(self, token_id: int) -> bool:
        return self.movie_start <= token_id < len(self.labels)

    def is_genre(self, token_id: int) -> bool:
        return self.genre_start <= token_id < self.rating_start

    def is_rating(self, token_id: int) -> bool:
        return self.rating_start <= token_id < self.movie_start

    def is_task(self, token_id: int) -> bool:
        return len(STRUCTURAL_TOKENS) <= token_id < self.genre_start

    def is_structural(self, token_id: int) -> bool:
        return 0 <= token_id < len(STRUCTURAL_TOKENS)

    def segment(self, token_id: int) -> str:
        if self.is_structural(token_id):
            return "structural"
        if self.is_task(token_id):
            return "task"
        if self.is_genre(token_id):
            return "genre"
        if self.is_rating(token_id):
            return "rating"
        if self.is_movie(token_id):
            return "movie"
        raise IndexError(token_id)

    def table_bytes(self) -> bytes:
        return "\n".join(self.labels).encode("utf-8")

    def hash(self) -> str:
        """SHA-256 hex digest of the token table."""
        return hashlib.sha256(self.table_bytes()).hexdigest()


def build_vocabulary(
    movies: Iterable[MovieRecord] | Iterable[int], genres: Iterable[str] | None = None
) -> Vocabulary:
    """Vocabulary over ``movies``; genres default to those the movies carry."""
    movies = list(movies)
    ids = [m.movie_id if isinstance(m, MovieRecord) else int(m) for m in movies]
    if genres is None:
        genres = {g for m in movies if isinstance(m, MovieRecord) for g in m.genres}
    return Vocabulary(genres, ids)


@dataclass(frozen=True)
class Corpus:
    """Prepared dataset: movies, vocabulary and filtered user sequences."""

    movies: Mapping[int, MovieRecord]
    vocab: Vocabulary
    sequences: tuple[InteractionSequence, ...]
    stats: Mapping[str, int] = field(default_factory=dict)

    @cached_property
    def _by_user(self) -> dict[int, InteractionSequence]:
        return {s.user_id: s for s in self.sequences}

    def user(self, user_id: int) -> InteractionSequence:
        return self._by_user[user_id]

    def __len__(self) -> int:
        return len(self.sequences)


def build_corpus(
    interactions: Sequence[RawInteraction],
    movies: Sequence[MovieRecord],
    min_length: int = MIN_INTERACTIONS,
    max_length: int = MAX_SEQUENCE_LENGTH,
) -> Corpus:
    seqs = build_sequences(interactions, movies, min_length, max_length)
    vocab = build_vocabulary(movies)
    users = {it.user_id for it in interactions}
    stats = {
        "users_total": len(users),
        "users_kept": len(seqs),
        "users_dropped": len(users) - len(seqs),
        "interactions": len(interactions),
        "interactions_kept": int(sum(len(s) for s in seqs)),
        "truncated_users": sum(
            1 for n in _user_counts(interactions).values() if n > max_length
        ),
    }
    return Corpus({m.movie_id: m for m in movies}, vocab, tuple(seqs), stats)


def _user_counts(interactions) -> dict[int, int]:
    counts: dict[int, int] = defaultdict(int)
    for it in interactions:
        counts[it.user_id] += 1
    return counts


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"), sort_keys=True)


def dumps_corpus(corpus: Corpus) -> str:
    """Serialize to the line-oriented corpus format.

    Line 1 is a header object; then one ``{"vocab": [...]}`` line; then one
    ``{"movie": ...}`` line per movie (ascending id); then one ``{"seq": ...}``
    line per user. Ratings are written as floats and timestamps as ints, so
    ``loads_corpus(dumps_corpus(c))`` re-serializes to identical text.
    """
    buf = io.StringIO()
    header = {
        "format": CORPUS_FORMAT,
        "version": CORPUS_VERSION,
        "vocab_hash": corpus.vocab.hash(),
        "stats": dict(sorted(corpus.stats.items())),
        "num_movies": len(corpus.movies),
        "num_sequences": len(corpus.sequences),
    }
    buf.write(_dump(header) + "\n")
    buf.write(_dump({"vocab": list(corpus.vocab.labels)}) + "\n")
    for mid in sorted(corpus.movies):
        m = corpus.movies[mid]
        buf.write(_dump({"movie": [m.movie_id, m.title, list(m.genres)]}) + "\n")
    for s in corpus.sequences:
        buf.write(
            _dump({"seq": [s.user_id, list(s.movie_ids), list(s.ratings), list(s.timestamps)]})
            + "\n"
        )
    return buf.getvalue()


def loads_corpus(text: str) -> Corpus:
    lines = text.splitlines()
    try:
        header = json.loads(lines[0])
    except (IndexError, json.JSONDecodeError) as exc:
        raise CorpusFormatError(f"bad corpus header: {exc}") from None
    if header.get("format") != CORPUS_FORMAT:
        raise CorpusFormatError("not an lsrec corpus file")
    if header.get("version") != CORPUS_VERSION:
        raise CorpusFormatError(f"unsupported corpus version {header.get('version')}")
    n_movies, n_seqs = header["num_movies"], header["num_sequences"]
    if len(lines) != 2 + n_movies + n_seqs:
        raise CorpusFormatError("corpus file is truncated or has trailing data")
    try:
        labels = tuple(json.loads(lines[1])["vocab"])
        movies = {}
        for line in lines[2 : 2 + n_movies]:
            mid, title, genres = json.loads(line)["movie"]
            movies[mid] = MovieRecord(mid, title, tuple(genres))
        seqs = []
        for line in lines[2 + n_movies :]:
            uid, mids, ratings, ts = json.loads(line)["seq"]
            seqs.append(
                InteractionSequence(uid, tuple(mids), tuple(float(r) for r in ratings), tuple(ts))
            )
    except (KeyError, ValueError, TypeError) as exc:
        raise CorpusFormatError(f"malformed corpus record: {exc}") from None
    vocab = build_vocabulary(movies.values())
    if vocab.labels != labels or vocab.hash() != header["vocab_hash"]:
        raise CorpusFormatError("stored vocabulary does not match the movie table")
    return Corpus(movies, vocab, tuple(seqs), header.get("stats", {}))


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_text(dumps_corpus(corpus), encoding="utf-8")


def load_corpus(path: str | Path) -> Corpus:
    return loads_corpus(Path(path).read_text(encoding="utf-8"))
