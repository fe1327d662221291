"""Synthetic MovieLens-format data with genre and sequel structure.

Used for fixtures, demos and desk-scale experiments where the real dataset is
not available. Each user has a Dirichlet preference over genres and drifts
between genres as a sticky Markov chain; within a genre, movies are drawn by
popularity, and a watched movie is followed by its designated sequel with
some probability. A rating is a per-movie quality bias (higher for popular
movies) plus the user's affinity for the movie's primary genre plus noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

GENRES = (
    "Action", "Adventure", "Animation", "Children", "Comedy", "Crime", "Documentary",
    "Drama", "Fantasy", "Film-Noir", "Horror", "IMAX", "Musical", "Mystery", "Romance",
    "Sci-Fi", "Thriller", "War", "Western",
)


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 1000
    n_movies: int = 500
    n_genres: int = 12
    mean_length: float = 40.0
    max_length: int = 300
    min_length: int = 3
    genre_concentration: float = 0.3
    stay_prob: float = 0.85
    sequel_prob: float = 0.35
    popularity_exponent: float = 0.9
    multi_genre_prob: float = 0.4
    quality_std: float = 0.7
    rating_noise: float = 0.5
    seed: int = 0


def generate(spec: SyntheticSpec = SyntheticSpec()) -> tuple[list[str], list[str]]:
    """Return ``(ratings_lines, movies_lines)`` in MovieLens ``.dat`` syntax."""
    rng = np.random.default_rng(spec.seed)
    g_names = GENRES[: spec.n_genres]
    n_g = len(g_names)
    primary = rng.integers(n_g, size=spec.n_movies)
    movies_lines = []
    genre_sets = []
    for m in range(spec.n_movies):
        gs = [int(primary[m])]
        while rng.random() < spec.multi_genre_prob and len(gs) < 3:
            extra = int(rng.integers(n_g))
            if extra not in gs:
                gs.append(extra)
        genre_sets.append(gs)
        year = 1950 + int(rng.integers(60))
        movies_lines.append(f"{m + 1}::Movie {m + 1} ({year})::" + "|".join(g_names[g] for g in gs))
    popularity = 1.0 / np.arange(1, spec.n_movies + 1) ** spec.popularity_exponent
    popularity = popularity[rng.permutation(spec.n_movies)]
    logpop = np.log(popularity)
    logpop = (logpop - logpop.mean()) / (logpop.std() + 1e-12)
    quality = spec.quality_std * (0.5 * logpop + np.sqrt(0.75) * rng.standard_normal(spec.n_movies))
    by_genre = [np.flatnonzero(primary == g) for g in range(n_g)]
    sequel = np.full(spec.n_movies, -1)
    for members in by_genre:
        if len(members) > 1:
            perm = rng.permutation(members)
            sequel[perm[:-1]] = perm[1:]
    ratings_lines = []
    for u in range(spec.n_users):
        pref = rng.dirichlet(np.full(n_g, spec.genre_concentration))
        length = int(np.clip(rng.geometric(1.0 / spec.mean_length), spec.min_length, spec.max_length))
        length = min(length, spec.n_movies)
        watched = np.zeros(spec.n_movies, dtype=bool)
        genre = int(rng.choice(n_g, p=pref))
        ts = 946684800 + int(rng.integers(10**8))
        last = -1
        for _ in range(length):
            if last >= 0 and sequel[last] >= 0 and not watched[sequel[last]] and rng.random() < spec.sequel_prob:
                m = int(sequel[last])
            else:
                if rng.random() > spec.stay_prob:
                    genre = int(rng.choice(n_g, p=pref))
                pool = by_genre[genre]
                pool = pool[~watched[pool]]
                if pool.size == 0:
                    pool = np.flatnonzero(~watched)
                w = popularity[pool]
                m = int(rng.choice(pool, p=w / w.sum()))
            watched[m] = True
            affinity = pref[primary[m]] * n_g
            score = 3.0 + quality[m] + 0.5 * np.log1p(affinity) + rng.normal(0, spec.rating_noise)
            rating = float(np.clip(np.round(score * 2) / 2, 0.5, 5.0))
            ts += 1 + int(rng.integers(86400))
            ratings_lines.append(f"{u + 1}::{m + 1}::{rating:g}::{ts}")
            last = m
    return ratings_lines, movies_lines


def write(directory: str | Path, spec: SyntheticSpec = SyntheticSpec()) -> tuple[Path, Path]:
    """Write ``ratings.dat`` and ``movies.dat`` into ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ratings, movies = generate(spec)
    rp, mp = d / "ratings.dat", d / "movies.dat"
    rp.write_text("\n".join(ratings) + "\n", encoding="utf-8")
    mp.write_text("\n".join(movies) + "\n", encoding="utf-8")
    return rp, mp


def corpus(spec: SyntheticSpec = SyntheticSpec()):
    """Generate and prepare in memory."""
    from .dataset import build_corpus, parse_movies, parse_ratings

    ratings, movies = generate(spec)
    return build_corpus(parse_ratings(ratings), parse_movies(movies))
