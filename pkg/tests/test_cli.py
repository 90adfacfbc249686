import csv
import io

import numpy as np
import pytest

from barprune import cli, formats
from barprune.errors import ConfigError
from barprune.netgraph import PrunedGraph, cost_report, hard_prune
from barprune.trainer import evaluate

TINY = """\
# tiny end-to-end config
data_dir = {root}/data
out_dir = {root}/out
classes = 4
train_samples = 128
eval_samples = 64
image_size = 8
noise = 0.2
jitter = 0.2
stem_width = 6
stage_blocks = 1, 2
stage_widths = 6, 8
stage_strides = 1, 2
teacher_epochs_hi = 5
teacher_epochs_lo = 1
epochs_train = 10
epochs_finetune_hi = 1
epochs_finetune_lo = 1
baseline_epochs_hi = 1
baseline_epochs_lo = 0
batch_size = 32
lr = 0.005
gate_lr = 0.2
teacher_init = true
sweep_fractions = 0.5, 0.25
budget_fraction = 0.5
"""


def write_cfg(path, text):
    path.write_text(text, encoding="utf-8")
    return str(path)


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_cfg(root / "tiny.cfg", TINY.format(root=root))
    assert cli.main(["gen-data", "--config", cfg]) == 0
    assert cli.main(["train-teacher", "--config", cfg]) == 0
    return root, cfg


@pytest.fixture(scope="module")
def pruned(workspace, tmp_path_factory):
    root, cfg = workspace
    code = cli.main(["prune", "--config", cfg])
    return code, cli.read_report((root / "out" / "report.txt").read_text())


# ---------------------------------------------------------------------------
# config parsing


@pytest.mark.parametrize(
    "text, pattern",
    [
        ("seed = 1\nbogus = 2\n", r":2: unknown key 'bogus'"),
        ("seed = 1\n# note\nseed = 2\n", r":3: duplicate key 'seed'"),
        ("data_dir = x\njust words\n", r":2: expected 'key = value'"),
        ("seed = one\n", r":1: bad value for 'seed'"),
        ("teacher_init = maybe\n", r":1: bad value"),
    ],
)
def test_config_errors_name_the_line(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        cli.parse_config(text, "c.cfg")


def test_config_comments_lists_and_aliases():
    cfg = cli.parse_config("stage_widths = 4, 8 ,16  # trailing\n\nbudget.fraction = 0.25\nbudget.schedule=linear\n")
    assert cfg["stage_widths"] == (4, 8, 16)
    assert cfg["budget_fraction"] == 0.25 and cfg["schedule"] == "linear"
    assert cfg.get("seed") == 0
    with pytest.raises(ConfigError, match="duplicate"):
        cli.parse_config("budget_fraction = 0.5\nbudget.fraction = 0.25\n")


def test_missing_required_keys(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "c.cfg", "data_dir = d\nclasses = 4\n")
    code, _, err = run(capsys, "gen-data", "--config", cfg)
    assert code == cli.EXIT_CONFIG
    assert "train_samples" in err and "image_size" in err


def test_usage_errors_exit_one(tmp_path, capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["frobnicate", "--config", "x"])
    assert info.value.code == cli.EXIT_CONFIG
    code, _, err = run(capsys, "eval", "--config", str(tmp_path / "absent.cfg"))
    assert code == cli.EXIT_CONFIG and "absent.cfg" in err


def test_bad_budget_fraction(tmp_path):
    cfg = cli.parse_config("data_dir = d\nbudget_fraction = 1.5\n")
    with pytest.raises(ConfigError, match="budget_fraction"):
        cli.train_config(cfg)


def test_baseline_factors():
    assert cli.baseline_factors(0.5) == (2,)
    assert cli.baseline_factors(0.0625) == (2, 4, 8, 16)
    assert cli.baseline_factors(0.3) == (2, 4)


# ---------------------------------------------------------------------------
# gen-data


def test_gen_data_deterministic_and_sized(workspace, tmp_path, capsys):
    root, _ = workspace
    other = write_cfg(tmp_path / "c.cfg", TINY.format(root=tmp_path))
    assert run(capsys, "gen-data", "--config", other)[0] == 0
    for name in ("train-images.idx", "train-labels.idx", "eval-images.idx", "eval-labels.idx"):
        assert (root / "data" / name).read_bytes() == (tmp_path / "data" / name).read_bytes()
    assert (tmp_path / "data" / "train-images.idx").stat().st_size == 20 + 128 * 8 * 8 * 3
    labels = formats.load_idx(tmp_path / "data" / "train-images.idx", tmp_path / "data" / "train-labels.idx")[1]
    assert np.bincount(labels).tolist() == [32] * 4


def test_gen_data_refuses_overwrite(workspace, capsys):
    _, cfg = workspace
    code, _, err = run(capsys, "gen-data", "--config", cfg)
    assert code == cli.EXIT_CONFIG and "--force" in err
    assert run(capsys, "gen-data", "--config", cfg, "--force")[0] == 0


def test_seed_flag_changes_data(workspace, tmp_path, capsys):
    root, _ = workspace
    other = write_cfg(tmp_path / "c.cfg", TINY.format(root=tmp_path))
    assert run(capsys, "gen-data", "--config", other, "--seed", "5")[0] == 0
    a = (root / "data" / "train-images.idx").read_bytes()
    assert a != (tmp_path / "data" / "train-images.idx").read_bytes()


def test_corrupt_dataset_is_integrity_error(workspace, tmp_path, capsys):
    other = write_cfg(tmp_path / "c.cfg", TINY.format(root=tmp_path))
    assert run(capsys, "gen-data", "--config", other)[0] == 0
    labels = tmp_path / "data" / "train-labels.idx"
    raw = bytearray(labels.read_bytes())
    raw[1] ^= 0xFF
    labels.write_bytes(bytes(raw))
    code, _, err = run(capsys, "train-teacher", "--config", other)
    assert code == cli.EXIT_INTEGRITY and "train-labels.idx" in err


# ---------------------------------------------------------------------------
# train-teacher


def test_teacher_rerun_byte_identical(workspace, tmp_path, capsys):
    root, cfg = workspace
    assert run(capsys, "train-teacher", "--config", cfg, "--out", str(tmp_path))[0] == 0
    for name in ("teacher.ckpt", "teacher.logits", "teacher.csv"):
        assert (root / "out" / name).read_bytes() == (tmp_path / name).read_bytes()


def test_teacher_report_matches_reload(workspace, capsys):
    root, cfg = workspace
    report = cli.read_report((root / "out" / "teacher.txt").read_text())
    cache = formats.load_cache(root / "out" / "teacher.logits")
    train, evalset = cli.load_datasets(cli.load_config(cfg))
    assert cache.shape == (len(train), 4) and int(report["cache_rows"]) == len(train)
    teacher = cli.load_model(root / "out" / "teacher.ckpt")
    assert float(report["eval_accuracy"]) == evaluate(teacher, evalset) > 0.5
    code, out, _ = run(capsys, "eval", "--config", cfg, "--checkpoint", str(root / "out" / "teacher.ckpt"))
    assert code == 0
    assert float(cli.read_report(out)["accuracy"]) == float(report["eval_accuracy"])


def test_unpruned_graph_matches_dense(workspace):
    root, cfg = workspace
    teacher = cli.load_model(root / "out" / "teacher.ckpt")
    _, evalset = cli.load_datasets(cli.load_config(cfg))
    masks = {k: np.ones_like(m) for k, m in teacher.effective_masks().items()}
    graph = PrunedGraph.from_arrays(hard_prune(teacher, masks).to_arrays())
    assert evaluate(graph, evalset) == evaluate(teacher, evalset)
    assert graph.volume() == cost_report(graph).full_volume


# ---------------------------------------------------------------------------
# prune / eval


def test_prune_meets_half_budget(pruned):
    code, report = pruned
    assert code == 0 and report["status"] == "ok"
    assert float(report["volume_factor"]) >= 2.0
    assert float(report["V"]) <= float(report["B"])
    assert float(report["regular_block_volume"]) >= float(report["V"])
    assert float(report["regular_block_flops"]) >= float(report["flops"])


def test_prune_report_reload_oracle(workspace, pruned):
    root, cfg = workspace
    _, report = pruned
    graph = cli.load_model(root / "out" / "pruned.ckpt")
    costs = cost_report(graph)
    assert report["V"] == repr(costs.volume) and report["flops"] == repr(costs.flops)
    assert report["V_F"] == repr(costs.full_volume)
    assert report["volume_factor"] == repr(costs.volume_factor)
    assert report["flop_factor"] == repr(costs.flop_factor)
    assert report["regular_block_volume"] == repr(costs.regular_volume)
    _, evalset = cli.load_datasets(cli.load_config(cfg))
    assert report["accuracy"] == repr(evaluate(graph, evalset))


def test_prune_run_log_round_trips(workspace, pruned):
    root, _ = workspace
    from barprune.trainer import RunLog

    text = (root / "out" / "run.csv").read_text()
    assert RunLog.from_csv(text).to_csv() == text


def test_eval_prints_cost_report_flops(workspace, pruned, capsys):
    root, cfg = workspace
    code, out, _ = run(capsys, "eval", "--config", cfg)
    assert code == 0
    printed = cli.read_report(out)
    costs = cost_report(cli.load_model(root / "out" / "pruned.ckpt"))
    assert float(printed["flops"]) == costs.flops and float(printed["volume"]) == costs.volume
    assert float(printed["latency_ms_per_batch"]) > 0


def test_eval_corrupt_checkpoint(workspace, pruned, tmp_path, capsys):
    root, cfg = workspace
    raw = bytearray((root / "out" / "pruned.ckpt").read_bytes())
    raw[len(raw) // 2] ^= 0x04
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(raw))
    code, _, err = run(capsys, "eval", "--config", cfg, "--checkpoint", str(bad))
    assert code == cli.EXIT_INTEGRITY and "bad.ckpt" in err


def test_prune_without_teacher(workspace, tmp_path, capsys):
    _, cfg = workspace
    code, _, err = run(capsys, "prune", "--config", cfg, "--out", str(tmp_path / "empty"))
    assert code == cli.EXIT_CONFIG and "teacher.ckpt" in err


def test_unreachable_budget_exits_three(workspace, tmp_path, capsys):
    root, _ = workspace
    text = TINY.format(root=root).replace("gate_lr = 0.2", "gate_lr = 0.0001").replace("epochs_train = 10", "epochs_train = 1")
    cfg = write_cfg(tmp_path / "c.cfg", text.replace("budget_fraction = 0.5", "budget.fraction = 0.05"))
    out = tmp_path / "o"
    out.mkdir()
    for name in ("teacher.ckpt", "teacher.logits"):
        (out / name).write_bytes((root / "out" / name).read_bytes())
    code, _, err = run(capsys, "prune", "--config", cfg, "--out", str(out))
    assert code == cli.EXIT_BUDGET and "exceeds budget" in err
    report = cli.read_report((out / "report.txt").read_text())
    assert report["status"] == "budget_violation" and float(report["V"]) > float(report["B"])


# ---------------------------------------------------------------------------
# sweep


def test_sweep_csv(workspace, tmp_path, capsys):
    root, _ = workspace
    cfg = write_cfg(tmp_path / "c.cfg", TINY.format(root=root) + "sweep_methods = bar, random, bogus\n")
    out = tmp_path / "o"
    out.mkdir()
    for name in ("teacher.ckpt", "teacher.logits"):
        (out / name).write_bytes((root / "out" / name).read_bytes())
    code, printed, _ = run(capsys, "sweep", "--config", cfg, "--out", str(out))
    assert code == 0
    text = (out / "sweep.csv").read_text()
    assert printed == text
    rows = list(csv.DictReader(io.StringIO(text)))
    assert tuple(rows[0]) == cli.SWEEP_COLUMNS
    for method in ("bar", "random", "bogus"):
        mine = [r for r in rows if r["method"] == method]
        assert len(mine) == 2
        fractions = [float(r["budget_fraction"]) for r in mine]
        assert fractions == sorted(fractions, reverse=True)
    assert all(r["status"] == "error:ConfigError" for r in rows if r["method"] == "bogus")
    for r in rows:
        if r["method"] == "bar":
            graph = cli.load_model(out / "sweep" / f"bar_x{float(r['factor']):g}.ckpt")
            assert graph.volume() == float(r["V"])
            if r["status"] == "ok":
                assert graph.volume() <= float(r["B"])
