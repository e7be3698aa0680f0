import numpy as np
import pytest

from surfband.cli import UsageError, build_parser, main, parse_boundary, parse_function
from surfband.baselines import real_sph_harm
from surfband.operator import init_params, load_params, save_params

PTS = np.array([[0.0, 0.0, 1.0], [0.6, 0.8, 0.0], [0.0, -1.0, 0.0]])


def test_parse_function_forms():
    np.testing.assert_allclose(parse_function("ylm:2,0")(PTS), real_sph_harm(2, 0, PTS))
    np.testing.assert_array_equal(parse_function("const:2.5")(PTS), 2.5)
    np.testing.assert_allclose(parse_function("x + 2*z**2")(PTS), PTS[:, 0] + 2 * PTS[:, 2] ** 2)
    np.testing.assert_allclose(parse_function("sin(pi*y)")(PTS), np.sin(np.pi * PTS[:, 1]))
    np.testing.assert_array_equal(parse_function("1")(PTS), 1.0)
    with pytest.raises(UsageError):
        parse_function("x +")
    with pytest.raises(Exception):
        parse_function("__import__('os')")(PTS)


def test_parse_boundary():
    assert parse_boundary(None) is None
    spec = parse_boundary("plane:z<=0.25,g=const:1")
    assert spec.cut.axis == 2 and spec.cut.level == 0.25 and spec.cut.sign == -1.0
    np.testing.assert_array_equal(spec.g(PTS), 1.0)
    assert parse_boundary("plane:y=-0.5,g=x").cut.sign == 1.0
    for bad in ("z=0,g=1", "plane:w=0,g=1", "plane:x=0"):
        with pytest.raises(UsageError):
            parse_boundary(bad)


def test_parser_lists_commands():
    sub = build_parser()._subparsers._group_actions[0].choices
    assert {"solve-heat", "solve-poisson", "baseline-cpm", "baseline-fem", "bench-sphere",
            "bench-remesh", "bench-boundary", "bench-runtime", "train"} <= set(sub)


@pytest.fixture(scope="module")
def weights(tmp_path_factory):
    p = tmp_path_factory.mktemp("w") / "w.npz"
    save_params(init_params(0, modulation="gating", lam=1.7), p)
    return str(p)


def test_solve_heat_writes_outputs(weights, tmp_path, capsys):
    out = str(tmp_path / "run" / "heat")
    rc = main(["solve-heat", "--dx", "0.1", "--k", "100", "--t-final", "0.02",
               "--vertices", "500", "--weights", weights, "--u0", "const:2", "--out", out])
    assert rc == 0
    text = capsys.readouterr().out
    assert "kind = heat" in text and "cadence = 8" in text
    surf = np.loadtxt(out + "_surface.csv", delimiter=",", skiprows=1)
    assert surf.shape == (500, 4)
    np.testing.assert_allclose(surf[:, 3], 2.0, atol=1e-8)
    assert (tmp_path / "run" / "heat_band.csv").exists()
    assert "n_band" in (tmp_path / "run" / "heat_report.txt").read_text()


def test_baselines_run(tmp_path, capsys):
    assert main(["baseline-fem", "--vertices", "500", "--pde", "poisson"]) == 0
    assert "solver = sfem" in capsys.readouterr().out
    assert main(["baseline-cpm", "--dx", "0.12", "--pde", "heat", "--t-final", "0.01",
                 "--vertices", "300"]) == 0
    text = capsys.readouterr().out
    assert "extension = cpm-tricubic" in text and "cadence = 1" in text


def test_usage_errors_exit(weights):
    with pytest.raises(SystemExit) as e:
        main(["solve-poisson", "--weights", weights, "--f", "x +"])
    assert e.value.code == 2
    with pytest.raises(SystemExit):
        main(["solve-heat", "--boundary", "plane:q=1,g=1"])
    with pytest.raises(SystemExit):
        main(["nonsense"])


def test_train_command(tmp_path, capsys):
    cfg = tmp_path / "t.toml"
    cfg.write_text("[train]\nspacing = 0.1\nk = 60\nshape_level = 3\nsamples_per_cell = 2.0\n"
                   "max_features = 32\nhidden = [16, 16]\nd = 16\n")
    out = tmp_path / "w.npz"
    assert main(["train", "--config", str(cfg), "--epochs", "1", "--alpha", "0",
                 "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "epoch    1" in text
    P = load_params(out)
    assert P.meta["alpha"] == 0.0
    assert (tmp_path / "w_history.csv").exists()
