import pytest

from scanmatch import cli


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    out = tmp_path_factory.mktemp("data") / "toy"
    assert cli.main(["gen-data", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="session")
def ti_model(toy_data, tmp_path_factory):
    """Short text-image run on the default synthetic data."""
    ckpt = tmp_path_factory.mktemp("model") / "ti.ckpt"
    rc = cli.main(["train", "--data", str(toy_data), "--out", str(ckpt),
                   "--preset", "toy-ti-avg", "--epochs", "8"])
    assert rc == 0
    return ckpt
