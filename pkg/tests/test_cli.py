import os
from pathlib import Path

import pytest

from iml.cli import (
    CSV_HEADER,
    ConfigError,
    ReportRow,
    cmd_dispatch,
    dump_config,
    emit_report,
    parse_config,
    summary_markdown,
)

TINY_INI = """\
[data]
train_classes_per_domain = 5
unseen_classes_per_domain = 3
dim = 6
cluster_std = 0.4
offset_magnitude = 2.5
samples_per_class = 30

[train]
epochs = 2
tasks_per_epoch = 10
ways = 3
shots = 2
queries = 5
val_episodes = 5
hidden_dims = 16
embed_dim = 8

[eval]
n_episodes = 40
"""


@pytest.fixture()
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.ini"
    p.write_text(TINY_INI)
    return str(p)


# ---- config parsing ----


def test_defaults_without_config():
    rc = parse_config(None, env={})
    assert rc.profile == "desk"
    assert rc.train.epochs == 30
    assert rc.train.tasks_per_epoch == 100
    assert rc.eval.n_episodes == 500
    assert (rc.train.episode.ways, rc.train.episode.shots,
            rc.train.episode.queries) == (5, 5, 15)
    assert rc.train.lr == 1e-3
    assert rc.data.train_classes_per_domain == 16
    assert rc.data.dim == 16
    assert rc.data.cluster_std == 0.5
    assert rc.hidden_dims == (32,)
    assert rc.embed_dim == 16
    assert rc.rounds == 2


def test_profile_fills_unset_knobs(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nprofile = paper-scale\n")
    rc = parse_config(str(p), env={})
    assert (rc.train.epochs, rc.train.tasks_per_epoch) == (200, 800)
    assert rc.eval.n_episodes == 2000


def test_explicit_value_beats_profile(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nprofile = paper-scale\nepochs = 7\n")
    rc = parse_config(str(p), env={})
    assert rc.train.epochs == 7
    assert rc.train.tasks_per_epoch == 800  # still from the profile


def test_unknown_profile(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nprofile = warehouse\n")
    with pytest.raises(ConfigError, match="profile"):
        parse_config(str(p), env={})


def test_unknown_section_and_key(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError, match="unknown config section"):
        parse_config(str(p), env={})
    p.write_text("[train]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="unknown config key train.learning_rate"):
        parse_config(str(p), env={})


def test_missing_config_file():
    with pytest.raises(ConfigError, match="not found"):
        parse_config("/no/such/file.ini", env={})


def test_empty_config_file_is_all_defaults(tmp_path):
    p = tmp_path / "empty.ini"
    p.write_text("")
    assert parse_config(str(p), env={}) == parse_config(None, env={})


def test_unparseable_value_names_the_key(tmp_path):
    p = tmp_path / "c.ini"
    p.write_text("[train]\nlr = fast\n")
    with pytest.raises(ConfigError, match="train.lr"):
        parse_config(str(p), env={})


def test_out_of_range_values(tmp_path):
    p = tmp_path / "c.ini"
    cases = [
        ("[train]\nlambda = -1\n", "train.lambda"),
        ("[train]\nlr = 0\n", "train.lr"),
        ("[train]\nways = 1\n", "train.ways"),
        ("[train]\nkl_order = sideways\n", "kl_order"),
        ("[data]\nkind = parquet\n", "data.kind"),
        ("[data]\ncluster_std = -0.5\n", "cluster_std"),
        ("[eval]\nn_episodes = 1\n", "n_episodes"),
        ("[eval]\nworkers = 0\n", "workers"),
        ("[eval]\nlambda_grid = 0.5,-2\n", "lambda_grid"),
        ("[eval]\nexemplar_grid = 0,5\n", "exemplar_grid"),
    ]
    for text, needle in cases:
        p.write_text(text)
        with pytest.raises(ConfigError, match=needle):
            parse_config(str(p), env={})


def test_set_overrides_file(tiny_cfg):
    rc = parse_config(tiny_cfg, ["train.epochs=9", "data.dim=4"], env={})
    assert rc.train.epochs == 9
    assert rc.data.dim == 4


def test_set_syntax_checked():
    with pytest.raises(ConfigError, match="--set"):
        parse_config(None, ["epochs=9"], env={})
    with pytest.raises(ConfigError, match="--set"):
        parse_config(None, ["train.epochs"], env={})


def test_seed_env_override(tiny_cfg):
    rc = parse_config(tiny_cfg, env={"IML_SEED": "77"})
    assert rc.train.seed == 77
    rc = parse_config(tiny_cfg, env={"IML_SEED": ""})
    assert rc.train.seed == 0  # empty value is ignored
    with pytest.raises(ConfigError, match="IML_SEED"):
        parse_config(tiny_cfg, env={"IML_SEED": "lucky"})


def test_dump_config_round_trip(tiny_cfg, tmp_path):
    rc = parse_config(tiny_cfg, ["train.lr=0.003"], env={})
    text = dump_config(rc)
    assert text == dump_config(rc)  # deterministic
    p = tmp_path / "resolved.ini"
    p.write_text(text)
    rc2 = parse_config(str(p), env={})
    assert dump_config(rc2) == text
    assert rc2.train.lr == 0.003
    assert rc2.train.episode == rc.train.episode


# ---- dispatch and exit codes ----


def test_dispatch_usage_errors(capsys):
    assert cmd_dispatch([]) == 1
    assert cmd_dispatch(["--help"]) == 0
    assert cmd_dispatch(["no-such-command"]) == 1
    # nu is not trainable incrementally; argparse rejects it as a choice
    assert cmd_dispatch(["train-incr", "--method", "nu"]) == 1


def test_dispatch_config_error(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[train]\nlr = 0\n")
    code = cmd_dispatch(["gen-data", "-c", str(bad), "--out", str(tmp_path / "r")])
    assert code == 1
    assert "config error" in capsys.readouterr().err


def test_dispatch_runtime_error(tiny_cfg, tmp_path, capsys):
    # evaluating before gen-data/train-base has produced anything
    code = cmd_dispatch(["eval", "--method", "ft", "-c", tiny_cfg,
                         "--out", str(tmp_path / "r")])
    assert code == 2
    assert "error" in capsys.readouterr().err


def test_eval_needs_exactly_one_target(tiny_cfg, tmp_path):
    out = str(tmp_path / "r")
    assert cmd_dispatch(["eval", "-c", tiny_cfg, "--out", out]) == 1
    assert cmd_dispatch(["eval", "--method", "ft", "--snapshot", "x.imlsnap",
                         "-c", tiny_cfg, "--out", out]) == 1


# ---- gen-data ----


def test_gen_data_layout(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    assert cmd_dispatch(["gen-data", "-c", tiny_cfg, "--out", str(out)]) == 0
    names = sorted(p.name for p in (out / "data").glob("*.csv"))
    assert names == ["new_test.csv", "new_train.csv", "new_val.csv",
                     "old_test.csv", "old_train.csv", "old_val.csv",
                     "unseen_test.csv"]
    assert (out / "config.resolved").exists()
    # 5 train classes per domain, 30 rows each
    lines = (out / "data" / "old_train.csv").read_text().splitlines()
    assert len(lines) == 1 + 5 * 30


def test_gen_data_deterministic(tiny_cfg, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert cmd_dispatch(["gen-data", "-c", tiny_cfg, "--out", str(a)]) == 0
    assert cmd_dispatch(["gen-data", "-c", tiny_cfg, "--out", str(b)]) == 0
    for name in ("old_train.csv", "new_train.csv", "unseen_test.csv"):
        assert (a / "data" / name).read_bytes() == (b / "data" / name).read_bytes()


def test_gen_data_without_unseen(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    code = cmd_dispatch(["gen-data", "-c", tiny_cfg, "--out", str(out),
                         "--set", "data.unseen_classes_per_domain=0"])
    assert code == 0
    assert not (out / "data" / "unseen_test.csv").exists()


# ---- end-to-end pipeline ----


def test_pipeline_smoke(tiny_cfg, tmp_path):
    out = str(tmp_path / "run")
    for argv in (
        ["gen-data", "-c", tiny_cfg, "--out", out],
        ["train-base", "-c", tiny_cfg, "--out", out],
        ["train-incr", "--method", "ida", "-c", tiny_cfg, "--out", out],
        ["eval", "--method", "ida", "-c", tiny_cfg, "--out", out],
        ["report", "-c", tiny_cfg, "--out", out],
    ):
        assert cmd_dispatch(argv) == 0, argv
    run = Path(out)
    assert (run / "snapshots" / "base.imlsnap").exists()
    assert (run / "snapshots" / "incr_ida.imlsnap").exists()
    eval_csv = (run / "reports" / "eval_ida.csv").read_text().splitlines()
    assert eval_csv[0] == CSV_HEADER
    assert len(eval_csv) == 4  # header + old,new,unseen
    summary = (run / "reports" / "summary.md").read_text()
    assert "| IDA |" in summary
    assert "3-way 2-shot (40 episodes)" in summary
    # training logs captured per stage
    assert (run / "logs" / "base.csv").exists()
    assert (run / "logs" / "incr_ida.csv").exists()


def test_eval_custom_snapshot_label(tiny_cfg, tmp_path):
    out = str(tmp_path / "run")
    assert cmd_dispatch(["gen-data", "-c", tiny_cfg, "--out", out]) == 0
    assert cmd_dispatch(["train-base", "-c", tiny_cfg, "--out", out]) == 0
    snap = str(Path(out) / "snapshots" / "base.imlsnap")
    code = cmd_dispatch(["eval", "--snapshot", snap, "--label", "teacher",
                         "--splits", "old", "-c", tiny_cfg, "--out", out])
    assert code == 0
    assert (Path(out) / "reports" / "eval_teacher.csv").exists()


def test_eval_rejects_unknown_split(tiny_cfg, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert cmd_dispatch(["gen-data", "-c", tiny_cfg, "--out", out]) == 0
    assert cmd_dispatch(["train-base", "-c", tiny_cfg, "--out", out]) == 0
    code = cmd_dispatch(["eval", "--method", "nu", "--splits", "old,bogus",
                         "-c", tiny_cfg, "--out", out])
    assert code == 1


def test_rounds_needs_enough_classes(tiny_cfg, tmp_path, capsys):
    out = str(tmp_path / "run")
    assert cmd_dispatch(["gen-data", "-c", tiny_cfg, "--out", out]) == 0
    assert cmd_dispatch(["train-base", "-c", tiny_cfg, "--out", out]) == 0
    # 5 new classes cannot make two rounds of 3-way episodes
    code = cmd_dispatch(["rounds", "--method", "ida", "-c", tiny_cfg,
                         "--out", out, "--set", "train.rounds=2"])
    assert code == 1
    assert "rounds" in capsys.readouterr().err


# ---- report rendering ----


def sample_rows():
    mk = lambda m, s, mean: ReportRow(m, s, 10, mean, 0.01, 3, 2, 0)
    return [
        mk("nu", "old", 0.95), mk("nu", "new", 0.40),
        mk("ft", "old", 0.80), mk("ft", "new", 0.90),
        mk("ida", "old", 0.92), mk("ida", "new", 0.90),
        mk("par", "old", 0.96), mk("par", "new", 0.93),
    ]


def test_summary_orders_and_bolds():
    text = summary_markdown(sample_rows())
    lines = text.splitlines()
    table = [l for l in lines if l.startswith("| ")]
    assert table[0] == "| method | old | new |"
    assert [l.split("|")[1].strip() for l in table[2:]] == ["NU", "FT", "IDA", "PAR"]
    # best adapted method per column is bold; nu/par never are
    ida_line = next(l for l in table if l.startswith("| IDA"))
    assert "**92.00 ± 1.00**" in ida_line
    ft_line = next(l for l in table if l.startswith("| FT"))
    assert "**" not in ft_line.split("|")[2]  # old column lost to ida
    nu_line = next(l for l in table if l.startswith("| NU"))
    par_line = next(l for l in table if l.startswith("| PAR"))
    assert "**" not in nu_line and "**" not in par_line


def test_summary_bold_ties_and_gaps():
    rows = sample_rows()
    # tie ft with ida on the new split, and drop ida's old cell
    rows = [r for r in rows if not (r.method == "ida" and r.split == "old")]
    text = summary_markdown(rows)
    ft_line = next(l for l in text.splitlines() if l.startswith("| FT"))
    ida_line = next(l for l in text.splitlines() if l.startswith("| IDA"))
    assert ft_line.count("**90.00 ± 1.00**") == 1
    assert ida_line.count("**90.00 ± 1.00**") == 1
    assert "—" in ida_line


def test_summary_groups_by_episode_shape():
    rows = sample_rows() + [ReportRow("ft", "old", 20, 0.5, 0.02, 5, 1, 0)]
    text = summary_markdown(rows)
    assert "## 3-way 2-shot (10 episodes)" in text
    assert "## 5-way 1-shot (20 episodes)" in text


def test_emit_report(tmp_path):
    out = tmp_path / "summary.md"
    emit_report(sample_rows(), out)
    assert out.read_text().startswith("# Results")


def test_report_includes_sweep_sections(tiny_cfg, tmp_path):
    out = tmp_path / "run"
    reports = out / "reports"
    reports.mkdir(parents=True)
    reports.joinpath("eval_ft.csv").write_text(
        CSV_HEADER + "\nold,10,0.8,0.01,3,2,0\n")
    reports.joinpath("sweep_lambda.csv").write_text(
        "lambda,label,split,n,mean,ci,ways,shots,seed\n"
        "0.0,old,old,10,0.7,0.01,3,2,0\n"
        "10.0,old,old,10,0.9,0.01,3,2,0\n")
    assert cmd_dispatch(["report", "-c", tiny_cfg, "--out", str(out)]) == 0
    text = (reports / "summary.md").read_text()
    assert "## Alignment-weight sweep" in text
    assert "| 0.0 | 70.00 ± 1.00 |" in text
    assert "| 10.0 | 90.00 ± 1.00 |" in text


def test_report_without_evals_fails(tiny_cfg, tmp_path, capsys):
    code = cmd_dispatch(["report", "-c", tiny_cfg, "--out", str(tmp_path / "r")])
    assert code == 2
    assert "eval" in capsys.readouterr().err
