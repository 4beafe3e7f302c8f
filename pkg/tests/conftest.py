import os
from pathlib import Path

import pytest

from graphleak.graph import generate_sbm, load_dataset
from graphleak.rng import RngStream

ROOT = Path(__file__).resolve().parents[1]
DATA = Path(os.environ.get("GRAPHLEAK_DATA", ROOT / "data"))


def dataset_dir(name: str) -> Path:
    d = DATA / name
    if not (d / "meta.json").is_file():
        pytest.skip(f"dataset {name} not available under {DATA}")
    return d


@pytest.fixture(scope="session")
def cora():
    return load_dataset(dataset_dir("cora"))


@pytest.fixture(scope="session")
def sbm():
    return generate_sbm(120, 4, 0.15, 0.01, 12, RngStream(0))


@pytest.fixture(scope="session")
def cora_gcn(cora):
    """The standard two-layer GCN target on Cora (seed 0, 200 epochs)."""
    from graphleak.gnn import TrainConfig, default_model, train_standard

    model = default_model("gcn", cora, rng=RngStream(0))
    return train_standard(model, cora, TrainConfig(epochs=200), RngStream(0))


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; it is printed now and again in the terminal summary."""
    lines = request.config.stash.setdefault(ACCEPTANCE, [])

    def record(label: str, ok: bool | None, detail: str) -> None:
        status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
        line = f"[{status}] criterion {label}: {detail}"
        print(line)
        lines.append(line)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
