import csv
import json

import pytest

from hrmhmc.cli import CONFIG_SCHEMA, OUTPUT_ROOT_ENV, ConfigError, load_config, main

SMALL = """\
[experiment]
name = {name}
method = {method}
seeds = {seeds}

[model]
{model}

[sampler]
iterations = 400
burn_in = 150
max_depth = 6
"""


def write_config(tmp_path, name="funnel", method="block-exp", seeds="1", model="d = 4",
                 extra=""):
    path = tmp_path / f"{name}-{method}.ini"
    path.write_text(SMALL.format(name=name, method=method, seeds=seeds, model=model) + extra)
    return path


def read_csv(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# ----------------------------------------------------------------------------
# configuration


def test_misspelt_key_is_named(tmp_path, capsys):
    path = write_config(tmp_path, extra="stepsize = 0.1\n")
    with pytest.raises(ConfigError, match="'stepsize'") as exc:
        load_config(path)
    assert "step_size" in str(exc.value)
    assert f"{path}:13" in str(exc.value)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "stepsize" in capsys.readouterr().err


def test_unknown_section_and_bad_values(tmp_path):
    path = tmp_path / "a.ini"
    path.write_text("[experimnt]\nname = funnel\n")
    with pytest.raises(ConfigError, match="did you mean 'experiment'"):
        load_config(path)
    path.write_text("[sampler]\niterations = many\n")
    with pytest.raises(ConfigError, match="cannot parse sampler.iterations"):
        load_config(path)
    path.write_text("[experiment]\nname = funnel\n[model]\ntau = 3\n")
    with pytest.raises(ConfigError, match="do not apply to funnel"):
        load_config(path)
    path.write_text("[sampler]\niterations = 10\nburn_in = 20\n")
    with pytest.raises(ConfigError, match="burn_in"):
        load_config(path)
    with pytest.raises(ConfigError, match="cannot read"):
        load_config(tmp_path / "missing.ini")


def test_every_key_has_a_default_entry():
    for section, keys in CONFIG_SCHEMA.items():
        assert keys, section
    assert CONFIG_SCHEMA["sampler"]["max_depth"] == 10
    assert CONFIG_SCHEMA["adapt"]["clip_quantile"] == 0.9


def test_config_values_reach_the_sampler(tmp_path):
    path = write_config(tmp_path, name="gaussian-test", method="diagonal", model="dim = 3",
                        extra="step_size = 0.2\n[adapt]\nmean_est = off\nkappa = 0.8\n")
    config, options = load_config(path)
    assert config.model == "gaussian" and config.model_options == {"dim": 3}
    assert config.step_size == 0.2 and config.mean_est is False and config.kappa == 0.8
    assert options["seeds"] == [1]


# ----------------------------------------------------------------------------
# run


def test_run_writes_all_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["run", "--config", str(write_config(tmp_path)), "--out", str(out)]) == 0
    for name in ("samples.csv", "stats.csv", "phi_trace.csv", "summary.csv", "summary.txt",
                 "meta.json"):
        assert (out / name).is_file(), name
    summary = read_csv(out / "summary.csv")
    assert summary[0] == ["method", "n_grad", "divergent_pct", "1000ESS/grad(v)",
                          "min 1000ESS/grad(x)"]
    assert summary[1][0] == "block-exp"
    samples = read_csv(out / "samples.csv")
    assert samples[0][:2] == ["iteration", "v"] and len(samples) == 251
    stats = read_csv(out / "stats.csv")
    assert stats[0] == ["iteration", "depth", "n_grad", "divergent", "accept_stat", "step_size"]
    assert len(stats) == 401
    meta = json.loads((out / "meta.json").read_text())
    assert meta["config"]["seed"] == 1 and meta["n_grad_total"] > 0
    assert "block-exp" in capsys.readouterr().out


def test_seed_list_gives_one_directory_per_chain(tmp_path):
    out = tmp_path / "multi"
    path = write_config(tmp_path, seeds="1, 2")
    assert main(["run", "--config", str(path), "--out", str(out)]) == 0
    assert sorted(p.name for p in out.iterdir()) == ["seed-1", "seed-2"]
    a = (out / "seed-1" / "samples.csv").read_bytes()
    b = (out / "seed-2" / "samples.csv").read_bytes()
    assert a != b


def test_seed_flag_and_chains_override(tmp_path):
    path = write_config(tmp_path)
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "c"),
                 "--chains", "2", "--seed", "5"]) == 0
    assert sorted(p.name for p in (tmp_path / "c").iterdir()) == ["seed-5", "seed-6"]
    assert main(["run", "--config", str(path), "--out", str(tmp_path / "d"),
                 "--seed", "3,3"]) == 2


def test_threads_give_identical_outputs(tmp_path):
    path = write_config(tmp_path, seeds="1, 2")
    main(["run", "--config", str(path), "--out", str(tmp_path / "serial")])
    main(["run", "--config", str(path), "--out", str(tmp_path / "pool"), "--threads", "2"])
    for seed in ("seed-1", "seed-2"):
        assert ((tmp_path / "serial" / seed / "samples.csv").read_bytes()
                == (tmp_path / "pool" / seed / "samples.csv").read_bytes())


def test_manifest_rerun_is_byte_identical(tmp_path):
    first = tmp_path / "first"
    main(["run", "--config", str(write_config(tmp_path)), "--out", str(first)])
    second = tmp_path / "second"
    assert main(["run", "--manifest", str(first / "meta.json"), "--out", str(second)]) == 0
    for name in ("samples.csv", "stats.csv", "phi_trace.csv", "summary.csv", "meta.json"):
        assert (first / name).read_bytes() == (second / name).read_bytes(), name


def test_output_root_environment_variable(tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    assert main(["run", "--config", str(write_config(tmp_path, method="diagonal"))]) == 0
    assert (tmp_path / "root" / "funnel-diagonal" / "summary.csv").is_file()


def test_run_needs_exactly_one_source(tmp_path):
    assert main(["run"]) == 2
    assert main(["run", "--manifest", str(tmp_path / "nope.json")]) == 2


# ----------------------------------------------------------------------------
# figure


def test_energy_budget_figure(tmp_path):
    out = tmp_path / "fig.csv"
    assert main(["figure", "funnel-energy-budget", "--d", "4", "--v-min", "-9",
                 "--v-max", "9", "--points", "19", "--out", str(out)]) == 0
    rows = read_csv(out)
    assert len(rows[0]) == 6 and len(rows) == 20
    assert all(not c.replace(".", "").replace("-", "").isdigit() for c in rows[0])
    i = rows[0].index("dU_centered")
    at_zero = [r for r in rows[1:] if float(r[0]) == 0.0]
    assert float(at_zero[0][i]) == 0.0


def test_unknown_figure(capsys):
    assert main(["figure", "funnel-energy"]) == 2
    assert "funnel-energy-budget" in capsys.readouterr().err


# ----------------------------------------------------------------------------
# compare


def test_compare_sorts_by_method(tmp_path, capsys):
    dirs = []
    for method in ("diagonal", "block-exp"):
        d = tmp_path / method
        main(["run", "--config", str(write_config(tmp_path, method=method)), "--out", str(d)])
        dirs.append(str(d))
    capsys.readouterr()
    table = tmp_path / "table.csv"
    assert main(["compare", *dirs, "--out", str(table)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert [line.split()[0] for line in lines[1:]] == ["block-exp", "diagonal"]
    rows = read_csv(table)
    assert [r[0] for r in rows[1:]] == ["block-exp", "diagonal"]
    # values come straight from the per-run summaries
    for row, d in zip(rows[1:], reversed(dirs)):
        assert row[1:5] == read_csv(f"{d}/summary.csv")[1][1:5]


def test_compare_missing_directory(tmp_path, capsys):
    missing = tmp_path / "not-there"
    assert main(["compare", str(missing)]) == 2
    assert str(missing) in capsys.readouterr().err


def test_shipped_configs_parse():
    from pathlib import Path
    shipped = sorted((Path(__file__).parents[1] / "configs").glob("*.ini"))
    assert len(shipped) >= 5
    for path in shipped:
        config, options = load_config(path)
        assert config.iterations > config.burn_in and options["seeds"]
