import numpy as np
import pytest

from zsqbench import model as M
from zsqbench.tensor import reset_tape


@pytest.fixture(autouse=True)
def _clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_spec(num_classes=3, in_ch=3, width=4):
    """conv-bn-relu -> maxpool -> conv-bn-relu -> global pool -> linear."""
    return [M.conv(in_ch, width), M.bn(width), M.relu(), M.maxpool(2),
            M.conv(width, 2 * width), M.bn(2 * width), M.relu(), M.avgpool(), M.linear(2 * width, num_classes)]


def randomize_bn(model, rng):
    """Give BN buffers and affine params non-trivial values."""
    for i in model.bn_layers:
        c = model.layers[i].hyper["features"]
        model.buffers[f"{i}.running_mean"][:] = rng.normal(0, 0.3, c)
        model.buffers[f"{i}.running_var"][:] = rng.uniform(0.5, 2.0, c)
        model.params[f"{i}.gamma"].data[:] = rng.uniform(0.5, 1.5, c)
        model.params[f"{i}.beta"].data[:] = rng.normal(0, 0.2, c)
    return model


@pytest.fixture
def tiny_model(rng):
    m = M.build_model(tiny_spec(), (3, 8, 8), seed=7)
    return randomize_bn(m, rng)


# -- desk pipeline, shared by the end-to-end tests ------------------------------------

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def desk_teacher():
    import desk
    return desk.build_teacher()


@pytest.fixture(scope="session")
def desk_runs(desk_teacher):
    """Seed -> SeedRun, filled lazily so a test needing one seed runs only that one."""
    import desk
    cache = {}

    def get(seed):
        if seed not in cache:
            cache[seed] = desk.run_seed(desk_teacher, seed)
        return cache[seed]

    return get
