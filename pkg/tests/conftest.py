import pytest

from octcvd import config as cfgmod
from octcvd import pipeline as P

ACCEPTANCE = pytest.StashKey[list]()

TINY_YAML = """\
cohort:
  n_cases: 30
  n_controls: 60
vae:
  pretrain_pool: 40
  encoder_channels: [8, 8, 8, 8, 8, 8]
  decoder_channels: [8, 8, 8, 8, 8, 16]
  latent_dim: 16
  epochs: 2
forest:
  folds: 3
  grid: {n_trees: [10], max_depth: [4], min_samples_leaf: [1]}
  rfe_trees: 10
  rfe_k: 4
  rfe_k_overrides: {RE: 3}
explain:
  overlay_subjects: 2
"""


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(TINY_YAML)
    return path


@pytest.fixture(scope="session")
def tiny_config(tiny_config_path):
    return cfgmod.load(tiny_config_path)


@pytest.fixture(scope="session")
def tiny_run(tiny_config, tmp_path_factory):
    """A complete run on the small configuration, shared by read-only tests."""
    return P.RunDir(P.run_pipeline(tiny_config, tmp_path_factory.mktemp("run") / "run"))


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        request.config.stash[ACCEPTANCE].append(line)
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
