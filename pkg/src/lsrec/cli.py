"""Command-line entry point: ``lsrec prepare|train|eval|recommend|inspect-config``.

Every subcommand reads an optional run-config file (``key = value`` lines,
``#`` comments) and applies ``--set key=value`` overrides on top. Unknown
keys are errors. Without ``--config``, ``train``, ``eval`` and ``recommend``
start from the ``run.cfg`` already in the output directory. Outputs go under
``output_dir``::

    corpus/corpus.jsonl       prepared corpus
    checkpoints/best.ckpt     lowest-validation-loss parameters
    logs/train.tsv            per-epoch training log
    reports/metrics.tsv       machine-readable metrics (one row per K)
    reports/metrics.txt       human-readable table
    run.cfg                   effective config (defaults applied)

Exit codes: 0 success, 1 usage or config error, 2 runtime error.
The default thread count comes from ``LSREC_THREADS``.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from collections import Counter
from contextlib import nullcontext
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint
from .dataset import (
    CorpusFormatError,
    DatasetError,
    ParseError,
    build_corpus,
    load_corpus,
    parse_movies,
    parse_ratings,
    save_corpus,
)
from .model import PRESETS, ConfigError, closed_form_param_count, preset
from .promptgen import ALL_TASKS, SINGLE_TASK, PromptError, make_prompt

log = logging.getLogger("lsrec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
THREADS_ENV = "LSREC_THREADS"

CORPUS_FILE = Path("corpus") / "corpus.jsonl"
CHECKPOINT_FILE = Path("checkpoints") / "best.ckpt"
LOG_FILE = Path("logs") / "train.tsv"
METRICS_TSV = Path("reports") / "metrics.tsv"
METRICS_TXT = Path("reports") / "metrics.txt"
CONFIG_FILE = Path("run.cfg")


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class RunConfig:
    """All run settings. ``None`` is written as ``none`` in config files."""

    # data
    ratings: str | None = None
    movies: str | None = None
    synthetic_users: int | None = None
    synthetic_movies: int = 500
    synthetic_seed: int = 0
    subsample_users: int | None = None
    subsample_seed: int = 0
    min_length: int = 5
    max_length: int = 200
    # model
    preset: str = "small"
    hidden_dims: int | None = None
    intermediate_dims: int | None = None
    attn_heads: int | None = None
    kv_heads: int | None = None
    layers: int | None = None
    context_length: int | None = None
    attn_dropout: float | None = None
    # training
    tasks: str = "single"
    seed: int = 0
    init_seed: int | None = None
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100
    grad_clip: float = 1.0
    batch_rows: int = 16
    max_epochs: int = 100
    patience: int = 20
    max_steps: int | None = None
    full_loss: bool = False
    deterministic: bool = True
    threads: int | None = None
    # evaluation
    eval_split: str = "test"
    eval_ks: str = "1,5,10,20"
    sample_users: int | None = None
    eval_seed: int = 0
    eval_batch_rows: int = 16
    # output
    output_dir: str = "run"

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {sorted(PRESETS)}, got {self.preset!r}")
        if self.tasks not in ("single", "multi"):
            raise ConfigError(f"tasks must be 'single' or 'multi', got {self.tasks!r}")
        if self.eval_split not in ("val", "test"):
            raise ConfigError(f"eval_split must be 'val' or 'test', got {self.eval_split!r}")
        self.ks  # validates

    @property
    def ks(self) -> tuple[int, ...]:
        try:
            ks = tuple(sorted({int(k) for k in self.eval_ks.split(",") if k.strip()}))
        except ValueError:
            raise ConfigError(f"eval_ks must be comma-separated integers, got {self.eval_ks!r}") from None
        if not ks or ks[0] < 1:
            raise ConfigError("eval_ks must list positive integers")
        return ks

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def model_config(self, vocab_size: int):
        overrides = {
            f: getattr(self, f)
            for f in ("hidden_dims", "intermediate_dims", "attn_heads", "kv_heads", "layers",
                      "context_length", "attn_dropout")
            if getattr(self, f) is not None
        }
        return preset(self.preset, vocab_size, **overrides)

    def train_options(self):
        from .trainer import TrainOptions

        return TrainOptions(
            tasks=ALL_TASKS if self.tasks == "multi" else SINGLE_TASK,
            seed=self.seed, lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
            weight_decay=self.weight_decay, warmup_steps=self.warmup_steps,
            grad_clip=self.grad_clip, batch_rows=self.batch_rows, max_epochs=self.max_epochs,
            patience=self.patience, max_steps=self.max_steps, full_loss=self.full_loss,
            deterministic=self.deterministic, init_seed=self.init_seed,
        )

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                text = "none"
            elif isinstance(v, bool):
                text = "true" if v else "false"
            else:
                text = repr(v) if isinstance(v, float) else str(v)
            lines.append(f"{f.name} = {text}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> RunConfig:
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _convert(key: str, text: str):
    f = _FIELDS[key]
    kind = f.type if isinstance(f.type, str) else str(f.type)
    text = text.strip()
    if "None" in kind and text.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("bool"):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_assignments(pairs: Sequence[tuple[str, str, str]]) -> dict:
    """``(key, value, where)`` triples to typed values; unknown keys are errors."""
    out = {}
    for key, value, where in pairs:
        if key not in _FIELDS:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        out[key] = _convert(key, value)
    return out


def parse_config_text(text: str, source: str = "<config>") -> dict:
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:line {lineno}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value, f"{source}:line {lineno}"))
    return parse_assignments(pairs)


def loads_run_config(text: str, source: str = "<config>") -> RunConfig:
    return RunConfig(**parse_config_text(text, source))


def resolve_config(args: argparse.Namespace, reuse_saved: bool = False) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        values.update(parse_config_text(path.read_text(encoding="utf-8"), str(path)))
    sets = []
    for item in getattr(args, "set", None) or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        sets.append((k.strip(), v, "--set"))
    values.update(parse_assignments(sets))
    for key in ("output_dir", "ratings", "movies", "preset", "tasks", "seed", "threads",
                "sample_users", "eval_seed", "eval_split", "synthetic_users"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if getattr(args, "no_deterministic", False):
        values["deterministic"] = False
    saved = Path(values.get("output_dir", RunConfig.output_dir)) / CONFIG_FILE
    if reuse_saved and not getattr(args, "config", None) and saved.is_file():
        # later stages inherit the run directory's effective config
        values = {**parse_config_text(saved.read_text(encoding="utf-8"), str(saved)), **values}
    return RunConfig(**values)


def _threads(cfg: RunConfig) -> int | None:
    if cfg.threads is not None:
        return cfg.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def _thread_limit(cfg: RunConfig):
    n = 1 if cfg.deterministic else _threads(cfg)
    if n is None:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def _read_text(path: Path) -> str:
    raw = path.read_bytes()
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError:
        return raw.decode("latin-1")


def _write_config(cfg: RunConfig) -> None:
    cfg.out.mkdir(parents=True, exist_ok=True)
    (cfg.out / CONFIG_FILE).write_text(cfg.dumps(), encoding="utf-8")


def _subsample(interactions, n: int, seed: int):
    users = sorted({it.user_id for it in interactions})
    if n >= len(users):
        return interactions
    rng = np.random.default_rng(seed)
    keep = set(np.asarray(users)[rng.choice(len(users), size=n, replace=False)].tolist())
    return [it for it in interactions if it.user_id in keep]


def _length_histogram(lengths: Sequence[int]) -> str:
    edges = [5, 10, 20, 50, 100, 200]
    counts = Counter()
    for n in lengths:
        label = next((f"<{e}" for e in edges[1:] if n < e), f">={edges[-1]}")
        counts[label] += 1
    order = [f"<{e}" for e in edges[1:]] + [f">={edges[-1]}"]
    return " ".join(f"{k}:{counts[k]}" for k in order)


def cmd_prepare(cfg: RunConfig) -> int:
    if cfg.synthetic_users:
        from . import synthetic

        spec = synthetic.SyntheticSpec(
            n_users=cfg.synthetic_users, n_movies=cfg.synthetic_movies, seed=cfg.synthetic_seed
        )
        rating_lines, movie_lines = synthetic.generate(spec)
        interactions = parse_ratings(rating_lines, "synthetic ratings")
        movies = parse_movies(movie_lines, "synthetic movies")
    else:
        if not cfg.ratings or not cfg.movies:
            raise UsageError("prepare needs ratings and movies paths (or synthetic_users)")
        for p in (cfg.ratings, cfg.movies):
            if not Path(p).is_file():
                raise FileNotFoundError(f"input file not found: {p}")
        interactions = parse_ratings(_read_text(Path(cfg.ratings)), cfg.ratings)
        movies = parse_movies(_read_text(Path(cfg.movies)), cfg.movies)
    if cfg.subsample_users:
        interactions = _subsample(interactions, cfg.subsample_users, cfg.subsample_seed)
    corpus = build_corpus(interactions, movies, cfg.min_length, cfg.max_length)
    _write_config(cfg)
    path = cfg.out / CORPUS_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, path)
    s = corpus.stats
    print(f"users kept {s['users_kept']} dropped {s['users_dropped']} (of {s['users_total']})")
    print(f"interactions {s['interactions_kept']} of {s['interactions']}; "
          f"truncated users {s['truncated_users']}")
    print(f"vocabulary {len(corpus.vocab)} tokens ({corpus.vocab.num_movies} movies, "
          f"{len(corpus.vocab.genres)} genres)")
    print("length histogram " + _length_histogram([len(q) for q in corpus.sequences]))
    print(f"wrote {path}")
    return EXIT_OK


def _load_corpus(cfg: RunConfig):
    path = cfg.out / CORPUS_FILE
    if not path.is_file():
        raise FileNotFoundError(f"no prepared corpus at {path}; run 'lsrec prepare' first")
    return load_corpus(path)


def cmd_train(cfg: RunConfig, force: bool = False) -> int:
    from .trainer import train

    ckpt = cfg.out / CHECKPOINT_FILE
    if (ckpt.exists() or (cfg.out / LOG_FILE).exists()) and not force:
        raise UsageError(f"{cfg.out} already has a training run; pass --force to overwrite")
    corpus = _load_corpus(cfg)
    config = cfg.model_config(len(corpus.vocab))
    _write_config(cfg)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    (cfg.out / LOG_FILE).parent.mkdir(parents=True, exist_ok=True)
    with _thread_limit(cfg):
        result = train(
            corpus, config, cfg.train_options(), checkpoint_path=ckpt,
            log_path=cfg.out / LOG_FILE,
            on_epoch=lambda rec: print(rec.line(), flush=True),
        )
    st = result.state
    print(f"best epoch {st.best_epoch} val_loss {st.best_val_loss:.6f}; "
          f"{len(result.history)} epochs, {st.step} steps, "
          f"{result.history[-1].examples if result.history else 0} examples/epoch")
    print(f"wrote {ckpt}")
    return EXIT_OK


def _load_model(cfg: RunConfig, corpus):
    path = cfg.out / CHECKPOINT_FILE
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}; run 'lsrec train' first")
    params, config, _ = load_checkpoint(path, vocab_hash=corpus.vocab.hash())
    return params, config


def cmd_eval(cfg: RunConfig) -> int:
    from .evaluator import evaluate

    corpus = _load_corpus(cfg)
    params, config = _load_model(cfg, corpus)
    with _thread_limit(cfg):
        report, _ = evaluate(
            corpus, params, config, split=cfg.eval_split, ks=cfg.ks,
            sample_size=cfg.sample_users, seed=cfg.eval_seed, batch_rows=cfg.eval_batch_rows,
            identifiers={"preset": cfg.preset, "tasks": cfg.tasks},
        )
    (cfg.out / "reports").mkdir(parents=True, exist_ok=True)
    (cfg.out / METRICS_TSV).write_text(report.to_tsv(), encoding="utf-8")
    name = f"LSRec-{cfg.preset}" + ("-mt" if cfg.tasks == "multi" else "")
    table = report.to_table(name, f"{closed_form_param_count(config):,}")
    (cfg.out / METRICS_TXT).write_text(table, encoding="utf-8")
    print(table, end="")
    return EXIT_OK


def cmd_recommend(cfg: RunConfig, user: int, k: int) -> int:
    from .evaluator import next_token_logits, rank_movies

    if k < 1:
        raise UsageError("-k must be positive")
    corpus = _load_corpus(cfg)
    try:
        seq = corpus.user(user)
    except KeyError:
        raise DatasetError(f"unknown user id {user}") from None
    params, config = _load_model(cfg, corpus)
    vocab = corpus.vocab
    prompt = make_prompt(seq, len(seq), vocab, config.context_length)
    logits = next_token_logits(prompt, params, config)
    history = [vocab.movie_token(m) for m in seq.movie_ids]
    # the target argument only feeds RankedList.rank; a history item is always excluded
    ranked = rank_movies(logits, history, history[-1], vocab, k, seq.user_id)
    for pos, tok in enumerate(ranked.items, 1):
        mid = vocab.token_movie_id(tok)
        print(f"{pos}\t{mid}\t{float(logits[tok]):.4f}\t{corpus.movies[mid].title}")
    return EXIT_OK


def cmd_inspect(cfg: RunConfig, vocab_size: int | None) -> int:
    print(cfg.dumps(), end="")
    corpus_path = cfg.out / CORPUS_FILE
    if vocab_size is None and corpus_path.is_file():
        vocab_size = len(load_corpus(corpus_path).vocab)
    if vocab_size is not None:
        mc = cfg.model_config(vocab_size)
        print(f"# model: {mc.to_dict()}")
        print(f"# parameters: {closed_form_param_count(mc):,}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lsrec", description="Item-token sequential recommender.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="run-config file (key = value lines)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out", dest="output_dir", help="output directory")
        p.add_argument("--threads", type=int, help=f"thread count (default ${THREADS_ENV})")
        p.add_argument("--no-deterministic", action="store_true",
                       help="allow multi-threaded numerics")
        return p

    p = common(sub.add_parser("prepare", help="parse ratings/movies into a corpus"))
    p.add_argument("--ratings")
    p.add_argument("--movies")
    p.add_argument("--synthetic-users", dest="synthetic_users", type=int,
                   help="generate a synthetic corpus instead of reading files")

    p = common(sub.add_parser("train", help="train a model on the prepared corpus"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--tasks", choices=("single", "multi"))
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing run")

    p = common(sub.add_parser("eval", help="compute HR/NDCG/Div reports"))
    p.add_argument("--split", dest="eval_split", choices=("val", "test"))
    p.add_argument("--sample-users", dest="sample_users", type=int)
    p.add_argument("--seed", dest="eval_seed", type=int)

    p = common(sub.add_parser("recommend", help="print top-K titles for a user"))
    p.add_argument("--user", type=int, required=True)
    p.add_argument("-k", type=int, default=10)

    p = common(sub.add_parser("inspect-config", help="print the effective config"))
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--vocab-size", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help or a usage error
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, reuse_saved=args.command in ("train", "eval", "recommend"))
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.force)
        if args.command == "eval":
            return cmd_eval(cfg)
        if args.command == "recommend":
            return cmd_recommend(cfg, args.user, args.k)
        return cmd_inspect(cfg, args.vocab_size)
    except (UsageError, ConfigError) as exc:
        print(f"lsrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, DatasetError, CorpusFormatError, CheckpointError, PromptError,
            FileNotFoundError, RuntimeError, ValueError) as exc:
        print(f"lsrec: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
