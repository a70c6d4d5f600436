import csv

import pytest

from dgeeg import cli
from dgeeg.config import ConfigError, floats, load_config
from dgeeg.evalmetrics import read_metrics_csv
from dgeeg.solve import TransferMatrix

SMALL = ["--set", "mesh.seg_mm=8", "--set", "mesh.h_mm=8"]


@pytest.fixture
def out(tmp_path, monkeypatch):
    monkeypatch.setenv("DGEEG_OUTPUT_ROOT", str(tmp_path))
    return tmp_path / "dgeeg-out"


def test_genseg_writes_file(out, capsys):
    assert cli.main(["genseg"] + SMALL) == 0
    assert (out / "seg-8-h-8.seg").exists()
    assert "leaks" in capsys.readouterr().out


def test_genseg_rejects_bad_radii(out, capsys):
    assert cli.main(["genseg", "--set", "model.radii=80,78,86,92"]) == 2
    assert "error" in capsys.readouterr().err


def test_leaks_reduced_skull(out, capsys):
    assert cli.main(["leaks", "--set", "mesh.seg_mm=2", "--set", "model.skull_radius=83"]) == 0
    assert "leak vertices: 1344" in capsys.readouterr().out
    assert (out / "leaks.csv").exists()


def test_mesh_counts(out, capsys):
    assert cli.main(["mesh"]) == 0
    assert "vertices 56235 cells 51104" in capsys.readouterr().out


def test_forward_small(out, capsys):
    assert cli.main(["forward"] + SMALL + ["--set", "dipole.position=0,0,20"]) == 0
    text = capsys.readouterr().out
    assert "RDM" in text
    with open(out / "forward-seg-8-h-8-dg.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) > 100 and "reference" in rows[0]


def test_zero_penalty_rejected(out, capsys):
    assert cli.main(["forward"] + SMALL + ["--set", "scheme.eta=0"]) == 2
    assert "eta" in capsys.readouterr().err


def test_sweep_rows(out):
    args = ["sweep"] + SMALL + ["--set", "sources.eccentricities=0.2,0.5",
                                "--set", "sources.count=2"]
    assert cli.main(args) == 0
    rows = read_metrics_csv(out / "metrics.csv")
    assert len(rows) == 2 * 2 * 2
    assert {r["scheme"] for r in rows} == {"cg", "dg"}


def test_transfer_small(out):
    args = ["transfer"] + SMALL + ["--set", "transfer.electrodes=5"]
    assert cli.main(args) == 0
    T = TransferMatrix.load(next(out.glob("*.bin")))
    assert T.shape[0] == 4


def test_config_needs_units(tmp_path):
    p = tmp_path / "a.ini"
    p.write_text("[mesh]\nseg_mm = 2\n")
    with pytest.raises(ConfigError):
        load_config(p)
    p.write_text("[units]\nlength = mm\nconductivity = S/m\nmoment = A*mm\n[mesh]\nseg_mm = 2\n")
    assert load_config(p).getfloat("mesh", "seg_mm") == 2.0
    p.write_text("[units]\nlength = cm\n")
    with pytest.raises(ConfigError):
        load_config(p)


def test_overrides():
    cp = load_config(overrides=["model.radii=1, 2, 3, 4", "scheme.eta=0.5"])
    assert floats(cp, "model", "radii") == [1, 2, 3, 4]
    assert cp.getfloat("scheme", "eta") == 0.5
    with pytest.raises(ConfigError):
        load_config(overrides=["eta=0.5"])
    assert cli.main(["mesh", "--set", "nonsense"]) == 2


def test_quadrature_knob(out, capsys):
    args = ["forward"] + SMALL + ["--set", "dipole.position=0,0,20"]
    assert cli.main(args + ["--set", "quadrature.cell=3", "--set", "quadrature.boundary=11"]) == 0
    assert "RDM" in capsys.readouterr().out
    assert cli.main(args + ["--set", "quadrature.cell=99"]) == 2
