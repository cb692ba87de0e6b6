import io
import json

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from muskatflow import cli
from muskatflow.cli import (PRESETS, BadValue, MissingRequired, SimConfig, UnknownKey, main,
                            parse_config, read_pgm, serialize, write_pgm)


def test_parse_errors():
    with pytest.raises(BadValue) as e:
        parse_config("preset = fig1\nsigma = abc\n")
    assert e.value.key == "sigma"
    with pytest.raises(BadValue):
        parse_config("preset = fig1\nsigma = -1\n")
    with pytest.raises(UnknownKey) as e:
        parse_config("preset = fig1\nsigmaa = 0.1\n")
    assert e.value.key == "sigmaa"
    with pytest.raises(MissingRequired) as e:
        parse_config("nx = 16\nshape = square\n")
    assert e.value.key == "n_steps"
    with pytest.raises(BadValue):
        parse_config("preset = fig9\n")


def test_preset_defaults():
    cfg = parse_config("preset = fig1  # comment\n\n")
    assert cfg.sigma == 0.15 and cfg.w1 == 5.0 and cfg.w2 == 1.0 and cfg.tau == 1e-3
    assert cfg.potential == "gravity" and cfg.eps is None and cfg.nx == 128
    over = parse_config("preset = fig1\nnx = 32\neps = auto\n")
    assert over.nx == 32 and over.side == PRESETS["fig1"]["side"]
    assert parse_config("preset = fig3\n").potential == "ripping"


_values = st.fixed_dictionaries({
    "nx": st.sampled_from([16, 32, 64]),
    "tau": st.floats(1e-5, 1e-1),
    "sigma": st.floats(1e-3, 1.0),
    "n_steps": st.integers(0, 1000),
    "shape": st.sampled_from(["square", "disc", "halfplane"]),
    "center": st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9)),
    "side": st.floats(0.05, 0.6),
    "potential": st.sampled_from(["none", "gravity", "ripping"]),
    "eps": st.one_of(st.none(), st.floats(1e-4, 1e-2)),
    "stop_on_stationary": st.booleans(),
})


@settings(max_examples=40, deadline=None)
@given(_values)
def test_serialize_roundtrip(vals):
    cfg = SimConfig(**vals)
    try:
        cli._validate(cfg)
    except cli.ConfigError:
        assume(False)
    again = parse_config(serialize(cfg))
    assert again == cfg
    assert serialize(again) == serialize(cfg)


def test_table_roundtrip():
    cfg = parse_config("n_steps = 1\nshape = square\npotential = table\n"
                       "table1 = 0:0; 0.5:1; 0.5:2; 1:0\n")
    assert cfg.table1 == ((0.0, 0.0), (0.5, 1.0), (0.5, 2.0), (1.0, 0.0))
    assert parse_config(serialize(cfg)) == cfg


def test_pgm_roundtrip(tmp_path, rng):
    rho = rng.random((12, 7))
    write_pgm(tmp_path / "a.pgm", rho)
    back = read_pgm(tmp_path / "a.pgm")
    assert back.shape == rho.shape
    assert np.max(np.abs(back - rho)) <= 0.5 / 255 + 1e-12
    # top image row is y = 1
    img = (tmp_path / "a.pgm").read_bytes().split(maxsplit=4)[4]
    assert img[0] == round(rho[0, -1] * 255)


def _small(tmp_path, name="r", steps=4, extra=""):
    return parse_config(f"preset = fig1\nnx = 32\nn_steps = {steps}\nframe_stride = 2\n"
                        f"out = {tmp_path / name}\n{extra}")


def test_run_outputs_deterministic(tmp_path):
    assert cli.run(_small(tmp_path, "a")) == 0
    assert cli.run(_small(tmp_path, "b")) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "energy.csv").read_text() == (b / "energy.csv").read_text()
    rows = (a / "energy.csv").read_text().splitlines()
    assert rows[0].split(",")[0] == "step" and len(rows) == 1 + 1 + 4
    frames = sorted(p.name for p in (a / "frames").iterdir())
    assert frames == ["frame_00000.pgm", "frame_00002.pgm", "frame_00004.pgm"]
    recs = [json.loads(l) for l in (a / "diagnostics.jsonl").read_text().splitlines()]
    frame_recs = [r for r in recs if r["name"] == "frame"]
    assert all(r["metrics"]["characteristic"] and r["metrics"]["components"] == 1 for r in frame_recs)
    assert recs[-1]["name"] == "run_summary" and recs[-1]["pass"]
    cfg_back = parse_config((a / "config.txt").read_text())
    assert cfg_back == _small(tmp_path, "a")


def test_frames_characteristic(tmp_path):
    cfg = _small(tmp_path, "c", steps=3, extra="frame_stride = 1\n")
    cli.run(cfg)
    m0 = None
    for f in sorted((tmp_path / "c" / "frames").iterdir()):
        rho = read_pgm(f)
        assert set(np.unique(rho)) <= {0.0, 1.0}
        m0 = rho.sum() if m0 is None else m0
        assert rho.sum() == m0


def test_main_exit_codes(tmp_path, capsys):
    good = tmp_path / "g.txt"
    good.write_text(f"preset = fig2\nnx = 16\nn_steps = 2\nout = {tmp_path / 'g'}\n")
    assert main(["run", str(good)]) == 0
    bad = tmp_path / "b.txt"
    bad.write_text("preset = fig2\nsigma = x\n")
    assert main(["run", str(bad)]) == 2
    assert "sigma" in capsys.readouterr().err
    assert main(["preset", "fig1", "--nx", "16", "--steps", "1", "--out", str(tmp_path / "p")]) == 0
    assert (tmp_path / "p" / "energy.csv").exists()
    assert main(["probe", "shape", str(good)]) == 0
    assert main(["probe", "mixed_measure", str(good)]) == 0
    assert main(["probe", "concavity", str(good)]) == 0
    out = capsys.readouterr().out
    assert all(json.loads(l)["name"] for l in out.splitlines())


def test_nonconvergence_exit_code(tmp_path):
    cfg = _small(tmp_path, "n", steps=2, extra="max_iters = 1\naccept_res = 1e-12\n")
    assert cli.run(cfg) == 1
    last = json.loads((tmp_path / "n" / "diagnostics.jsonl").read_text().splitlines()[-1])
    assert last["name"] == "failure" and not last["pass"]


def test_oracle_check():
    buf = io.StringIO()
    assert cli.oracle_check(max_size=6, out=buf) is True
    lines = buf.getvalue().strip().splitlines()
    assert lines and all("PASS" in l for l in lines)
