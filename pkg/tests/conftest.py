import numpy as np
import pytest

from impactsound.cochlea import build_filterbank

from ._helpers import SR


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def fb():
    return build_filterbank(SR)


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Small synthetic dataset written through the command line."""
    from impactsound.cli import main

    out = tmp_path_factory.mktemp("synth")
    code = main(["make-synth", str(out), "--clips-per-class", "6", "--n-long", "1",
                 "--n-long-train", "1", "--spectral-per-class", "3"])
    assert code == 0
    return out


@pytest.fixture(scope="session")
def tiny_checkpoint(synth_dir, tmp_path_factory):
    from impactsound.cli import main

    path = tmp_path_factory.mktemp("model") / "model.bin"
    code = main(["train", str(synth_dir / "manifest.jsonl"), str(path), "--hidden-size", "8",
                 "--epochs", "1", "--n-components", "4"])
    assert code == 0
    return path


def pytest_terminal_summary(terminalreporter):
    from ._helpers import ACCEPTANCE

    ran = {int(r.nodeid.split("criterion_")[1].split("_")[0])
           for key in ("passed", "failed", "error") for r in terminalreporter.stats.get(key, [])
           if "test_acceptance.py" in r.nodeid and "criterion_" in r.nodeid}
    if not ran and not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for n in sorted(ran | set(ACCEPTANCE)):
        ok, detail = ACCEPTANCE.get(n, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
