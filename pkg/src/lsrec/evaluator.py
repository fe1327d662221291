"""Single-token ranking and HR/NDCG/Div at K.

For each user the Movie-task prompt (history before the target, ending at
START) is run once; the next-token logits restricted to movie tokens, with
the user's history removed, give the ranking. Ties go to the lower token id.

Report formats
--------------
``metrics.tsv``: header ``k\\thr\\tndcg\\tdiv`` then one row per K with
values printed to 10 decimals. ``metrics.txt``: one human-readable line in
the column order HR@1, Div@1, NDCG@10, HR@10, Div@10, NDCG@20, HR@20, Div@20
(plus any other K evaluated).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tc
from .dataset import Corpus, InteractionSequence, Vocabulary
from .model import ModelConfig, hidden_states, output_logits, segment_mask
from .packing import build_rows, first_fit
from .promptgen import make_prompt
from .tensor import Tensor

__all__ = [
    "RankedList",
    "MetricsReport",
    "DEFAULT_KS",
    "movie_ranks_from_logits",
    "rank_movies",
    "next_token_logits",
    "rank_for_user",
    "rank_users",
    "hit_rate",
    "ndcg",
    "diversity",
    "select_users",
    "evaluate",
    "evaluate_checkpoint",
]

DEFAULT_KS = (1, 5, 10, 20)


@dataclass(frozen=True)
class RankedList:
    user_id: int
    items: tuple[int, ...]
    target: int
    rank: int | None
    k_max: int

    def top(self, k: int) -> tuple[int, ...]:
        if k > self.k_max:
            raise ValueError(f"K={k} exceeds the ranked list length {self.k_max}")
        return self.items[:k]


def _movie_scores(logits: np.ndarray, history: Iterable[int], vocab: Vocabulary) -> np.ndarray:
    scores = np.array(logits[vocab.movie_start :], dtype=np.float64)
    hist = np.fromiter((t - vocab.movie_start for t in history), dtype=np.int64)
    if hist.size:
        scores[hist] = -np.inf
    return scores


def _target_rank(scores: np.ndarray, target_offset: int) -> int | None:
    s = scores[target_offset]
    if not np.isfinite(s):
        return None
    above = int(np.count_nonzero(scores > s))
    tied_before = int(np.count_nonzero(scores[:target_offset] == s))
    return above + tied_before + 1


def movie_ranks_from_logits(
    logits: np.ndarray, history: Iterable[int], target: int, vocab: Vocabulary
) -> int | None:
    """1-based rank of ``target`` among non-history movie tokens (None if excluded)."""
    return _target_rank(_movie_scores(logits, history, vocab), target - vocab.movie_start)


def rank_movies(
    logits: np.ndarray, history: Iterable[int], target: int, vocab: Vocabulary, k_max: int,
    user_id: int = -1,
) -> RankedList:
    """Top ``k_max`` movie tokens from one logit vector, history removed."""
    scores = _movie_scores(logits, history, vocab)
    order = np.argsort(-scores, kind="stable")[:k_max]
    order = order[np.isfinite(scores[order])]
    items = tuple(int(i) + vocab.movie_start for i in order)
    return RankedList(user_id, items, target, _target_rank(scores, target - vocab.movie_start), k_max)


def _history_tokens(seq: InteractionSequence, target_index: int, vocab: Vocabulary) -> list[int]:
    return [vocab.movie_token(m) for m in seq.movie_ids[:target_index]]


def next_token_logits(prompt, params: dict[str, Tensor], config: ModelConfig) -> np.ndarray:
    """Eval-mode logits ``[V]`` after the last prompt token."""
    with tc.no_grad():
        h = hidden_states(np.asarray(prompt)[None], params, config)
        logits = output_logits(tc.take_rows(tc.reshape(h, h.shape[1:]), [len(prompt) - 1]), params)
    return logits.data[0]


def rank_for_user(
    seq: InteractionSequence,
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    k_max: int,
    target_index: int,
) -> RankedList:
    """One eval-mode forward over the user's prompt; rank the next token."""
    prompt = make_prompt(seq, target_index, vocab, config.context_length)
    logits = next_token_logits(prompt, params, config)
    target = vocab.movie_token(seq.movie_ids[target_index])
    return rank_movies(
        logits, _history_tokens(seq, target_index, vocab), target, vocab, k_max, seq.user_id
    )


def rank_users(
    seqs: Sequence[InteractionSequence],
    params: dict[str, Tensor],
    config: ModelConfig,
    vocab: Vocabulary,
    k_max: int,
    split: str = "test",
    batch_rows: int = 16,
) -> list[RankedList]:
    """Rank many users, packing their prompts block-diagonally into rows."""
    t_len = config.context_length
    prompts = [make_prompt(s, s.split_index(split), vocab, t_len) for s in seqs]
    rows = first_fit([len(p) for p in prompts], t_len)
    out: list[RankedList | None] = [None] * len(seqs)
    with tc.no_grad():
        for i in range(0, len(rows), batch_rows):
            batch = build_rows(prompts, None, rows[i : i + batch_rows], t_len, vocab.PAD)
            last = np.array([r * t_len + start + n - 1 for r, start, n, _ in batch.spans])
            h = hidden_states(
                batch.tokens, params, config, batch.positions, segment_mask(batch.segment_ids)
            )
            b, t, d = h.shape
            logits = output_logits(tc.take_rows(tc.reshape(h, (b * t, d)), last), params).data
            for j, (_, _, _, idx) in enumerate(batch.spans):
                seq = seqs[idx]
                ti = seq.split_index(split)
                out[idx] = rank_movies(
                    logits[j],
                    _history_tokens(seq, ti, vocab),
                    vocab.movie_token(seq.movie_ids[ti]),
                    vocab,
                    k_max,
                    seq.user_id,
                )
    return out  # type: ignore[return-value]


def _check(lists: Sequence[RankedList], k: int) -> None:
    if not lists:
        raise ValueError("empty user population")
    if k < 1 or any(k > r.k_max for r in lists):
        raise ValueError(f"K={k} outside 1..K_max")


def hit_rate(lists: Sequence[RankedList], k: int) -> float:
    _check(lists, k)
    return sum(1 for r in lists if r.rank is not None and r.rank <= k) / len(lists)


def ndcg(lists: Sequence[RankedList], k: int) -> float:
    """Single relevant item per user, so the ideal DCG is 1."""
    _check(lists, k)
    gain = sum(1.0 / math.log2(1 + r.rank) for r in lists if r.rank is not None and r.rank <= k)
    return gain / len(lists)


def diversity(lists: Sequence[RankedList], k: int, vocab: Vocabulary | int) -> float:
    """Distinct items across all users' top-K lists over the movie count."""
    _check(lists, k)
    n_movies = vocab if isinstance(vocab, int) else vocab.num_movies
    seen: set[int] = set()
    for r in lists:
        seen.update(r.top(k))
    return len(seen) / n_movies


@dataclass
class MetricsReport:
    metrics: dict[int, dict[str, float]]
    population: int
    identifiers: Mapping[str, str] = field(default_factory=dict)

    @classmethod
    def from_lists(
        cls, lists: Sequence[RankedList], ks: Sequence[int], vocab: Vocabulary | int,
        identifiers: Mapping[str, str] | None = None,
    ) -> MetricsReport:
        metrics = {
            k: {"hr": hit_rate(lists, k), "ndcg": ndcg(lists, k), "div": diversity(lists, k, vocab)}
            for k in sorted(set(ks))
        }
        return cls(metrics, len(lists), dict(identifiers or {}))

    def __getitem__(self, key: str) -> float:
        """``report["hr@10"]`` style access."""
        name, k = key.lower().split("@")
        return self.metrics[int(k)][name]

    def to_tsv(self) -> str:
        lines = ["k\thr\tndcg\tdiv"]
        for k, m in sorted(self.metrics.items()):
            lines.append(f"{k}\t{m['hr']:.10f}\t{m['ndcg']:.10f}\t{m['div']:.10f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_tsv(cls, text: str, population: int = 0) -> MetricsReport:
        rows = [ln.split("\t") for ln in text.strip().splitlines()[1:]]
        return cls({int(k): {"hr": float(h), "ndcg": float(n), "div": float(d)}
                    for k, h, n, d in rows}, population)

    def columns(self) -> list[tuple[str, float]]:
        cols = []
        for k, m in sorted(self.metrics.items()):
            if k > 1:
                cols.append((f"NDCG@{k}", m["ndcg"]))
            cols.append((f"HR@{k}", m["hr"]))
            cols.append((f"Div@{k}", m["div"]))
        return cols

    def to_table(self, model: str = "LSRec", params: str = "") -> str:
        cols = self.columns()
        head = ["Model", "Params"] + [c for c, _ in cols]
        row = [model, params] + [f"{v:.4f}" for _, v in cols]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        fmt = lambda xs: "  ".join(x.rjust(w) for x, w in zip(xs, widths))  # noqa: E731
        meta = ", ".join(f"{k}={v}" for k, v in sorted(self.identifiers.items()))
        lines = [fmt(head), fmt(row), f"users={self.population}" + (f", {meta}" if meta else "")]
        return "\n".join(lines) + "\n"


def select_users(
    sequences: Sequence[InteractionSequence], sample_size: int | None, seed: int = 0
) -> list[InteractionSequence]:
    """All users, or ``sample_size`` drawn uniformly without replacement (user-id order)."""
    if sample_size is None or sample_size >= len(sequences):
        return list(sequences)
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(sequences), size=sample_size, replace=False))
    return [sequences[i] for i in idx]


def evaluate(
    corpus: Corpus,
    params: dict[str, Tensor],
    config: ModelConfig,
    split: str = "test",
    ks: Sequence[int] = DEFAULT_KS,
    sample_size: int | None = None,
    seed: int = 0,
    batch_rows: int = 16,
    identifiers: Mapping[str, str] | None = None,
) -> tuple[MetricsReport, list[RankedList]]:
    users = select_users(corpus.sequences, sample_size, seed)
    lists = rank_users(users, params, config, corpus.vocab, max(ks), split, batch_rows)
    ident = {"split": split, "sample": "all" if sample_size is None else str(sample_size),
             "seed": str(seed), **(identifiers or {})}
    return MetricsReport.from_lists(lists, ks, corpus.vocab, ident), lists


def evaluate_checkpoint(corpus: Corpus, path, **kwargs) -> tuple[MetricsReport, list[RankedList]]:
    """Load a checkpoint (vocabulary hash must match the corpus) and evaluate."""
    from .checkpoint import load_checkpoint

    params, config, _ = load_checkpoint(path, vocab_hash=corpus.vocab.hash())
    return evaluate(corpus, params, config, **kwargs)
