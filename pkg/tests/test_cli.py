import pytest

from lsrec import cli, synthetic
from lsrec.cli import RunConfig, loads_run_config, main
from lsrec.model import ConfigError


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def inputs(tmp_path):
    spec = synthetic.SyntheticSpec(n_users=30, n_movies=40, mean_length=12, max_length=40, seed=1)
    return synthetic.write(tmp_path / "raw", spec)


@pytest.fixture
def trained(tmp_path, inputs, capsys):
    ratings, movies = inputs
    out = tmp_path / "run"
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text("context_length = 64\nmax_epochs = 2\nbatch_rows = 4  # small batches\n")
    assert run(capsys, "prepare", "--config", str(cfg), "--ratings", str(ratings),
               "--movies", str(movies), "--out", str(out))[0] == 0
    assert run(capsys, "train", "--config", str(cfg), "--out", str(out))[0] == 0
    return out, cfg


def test_config_defaults_round_trip():
    cfg = RunConfig()
    assert loads_run_config(cfg.dumps()) == cfg
    odd = RunConfig(tasks="multi", lr=3e-4, sample_users=1000, full_loss=True)
    assert loads_run_config(odd.dumps()) == odd


def test_config_rejects_unknown_key_and_bad_values():
    with pytest.raises(ConfigError, match="line 2"):
        loads_run_config("seed = 1\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError):
        loads_run_config("preset = huge\n")
    with pytest.raises(ConfigError):
        loads_run_config("seed = one\n")
    with pytest.raises(ConfigError):
        loads_run_config("deterministic = maybe\n")


def test_usage_errors_exit_1(capsys, tmp_path):
    assert run(capsys, "bogus")[0] == 1
    assert run(capsys, "train", "--set", "nonsense=1", "--out", str(tmp_path))[0] == 1
    assert run(capsys, "train", "--config", str(tmp_path / "missing.cfg"))[0] == 1


def test_prepare_deterministic_bytes(capsys, tmp_path, inputs):
    ratings, movies = inputs
    blobs = []
    for name in ("a", "b"):
        code, out, _ = run(capsys, "prepare", "--ratings", str(ratings), "--movies", str(movies),
                           "--out", str(tmp_path / name))
        assert code == 0 and "users kept" in out and "length histogram" in out
        blobs.append((tmp_path / name / "corpus" / "corpus.jsonl").read_bytes())
    assert blobs[0] == blobs[1]


def test_prepare_missing_movies_no_output(capsys, tmp_path, inputs):
    ratings, _ = inputs
    out = tmp_path / "run"
    code, _, err = run(capsys, "prepare", "--ratings", str(ratings), "--movies",
                       str(tmp_path / "nope.dat"), "--out", str(out))
    assert code == 2 and "nope.dat" in err
    assert not out.exists()


def test_prepare_parse_error_names_line(capsys, tmp_path, inputs):
    _, movies = inputs
    bad = tmp_path / "ratings.dat"
    bad.write_text("1::1::4::10\n1::2::4\n")
    code, _, err = run(capsys, "prepare", "--ratings", str(bad), "--movies", str(movies),
                       "--out", str(tmp_path / "run"))
    assert code == 2 and "line 2" in err


def test_train_eval_recommend(capsys, trained):
    out, cfg = trained
    assert (out / "checkpoints" / "best.ckpt").is_file()
    assert (out / "logs" / "train.tsv").read_text().startswith("epoch\t")
    assert loads_run_config((out / "run.cfg").read_text()).max_epochs == 2

    code, table, _ = run(capsys, "eval", "--config", str(cfg), "--out", str(out))
    assert code == 0 and "HR@10" in table
    tsv = (out / "reports" / "metrics.tsv").read_text()
    assert [ln.split("\t")[0] for ln in tsv.splitlines()[1:]] == ["1", "5", "10", "20"]
    run(capsys, "eval", "--config", str(cfg), "--out", str(out))
    assert (out / "reports" / "metrics.tsv").read_text() == tsv

    code, _, _ = run(capsys, "eval", "--config", str(cfg), "--out", str(out),
                     "--sample-users", "10", "--seed", "3")
    assert code == 0 and "sample=10" in (out / "reports" / "metrics.txt").read_text()

    from lsrec.dataset import load_corpus

    corpus = load_corpus(out / "corpus" / "corpus.jsonl")
    seq = corpus.sequences[0]
    code, text, _ = run(capsys, "recommend", "--out", str(out), "--user", str(seq.user_id), "-k", "1")
    assert code == 0 and len(text.splitlines()) == 1
    code, text, _ = run(capsys, "recommend", "--out", str(out), "--user", str(seq.user_id), "-k", "5")
    ids = {int(line.split("\t")[1]) for line in text.splitlines()}
    assert len(ids) == 5 and not ids & set(seq.movie_ids)

    code, _, err = run(capsys, "recommend", "--out", str(out), "--user", "987654")
    assert code == 2 and "987654" in err


def test_train_refuses_existing_run(capsys, trained):
    out, cfg = trained
    code, _, err = run(capsys, "train", "--config", str(cfg), "--out", str(out))
    assert code == 1 and "--force" in err


def test_multitask_five_examples_per_user(capsys, trained):
    out, cfg = trained
    code, text, _ = run(capsys, "train", "--config", str(cfg), "--out", str(out), "--force",
                        "--tasks", "multi", "--set", "max_epochs=1")
    assert code == 0
    from lsrec.dataset import load_corpus

    n_users = len(load_corpus(out / "corpus" / "corpus.jsonl").sequences)
    epoch_line = (out / "logs" / "train.tsv").read_text().splitlines()[1]
    assert int(epoch_line.split("\t")[2]) == 5 * n_users


def test_eval_hash_mismatch(capsys, tmp_path, trained):
    out, cfg = trained
    other = tmp_path / "other"
    run(capsys, "prepare", "--synthetic-users", "20", "--set", "synthetic_movies=25", "--out", str(other))
    (other / "checkpoints").mkdir()
    (other / "checkpoints" / "best.ckpt").write_bytes((out / "checkpoints" / "best.ckpt").read_bytes())
    code, _, err = run(capsys, "eval", "--out", str(other))
    assert code == 2 and "vocabulary" in err


def test_inspect_config(capsys, tmp_path, monkeypatch):
    monkeypatch.setenv(cli.THREADS_ENV, "3")
    code, text, _ = run(capsys, "inspect-config", "--preset", "medium", "--vocab-size", "10040",
                        "--out", str(tmp_path))
    assert code == 0
    assert "preset = medium" in text and "# parameters:" in text
    cfg = loads_run_config("\n".join(ln for ln in text.splitlines() if not ln.startswith("#")))
    assert cfg.preset == "medium"
    assert cli._threads(cfg) == 3


def test_later_stages_inherit_saved_config(capsys, tmp_path):
    out = tmp_path / "run"
    common = ["--out", str(out), "--set", "synthetic_movies=20", "--set", "max_epochs=1",
              "--set", "preset=small", "--set", "hidden_dims=16", "--set", "intermediate_dims=32"]
    assert run(capsys, "prepare", "--synthetic-users", "12", *common)[0] == 0
    assert run(capsys, "train", "--tasks", "multi", *common)[0] == 0
    code, table, _ = run(capsys, "eval", "--out", str(out))
    assert code == 0
    assert "LSRec-small-mt" in table and "tasks=multi" in table
