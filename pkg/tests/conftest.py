import pytest

from pabn.data import SyntheticSpec, generate_synthetic, load_dataset

# the desk-scale benchmark: 40 classes (30 auxiliary + 10 target), 40 images each
BENCH_SPEC = SyntheticSpec(n_classes=40, n_images_per_class=40, seed=7)


@pytest.fixture(scope="session")
def bench_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("synthetic")
    generate_synthetic(BENCH_SPEC, root)
    return root


@pytest.fixture(scope="session")
def bench_index(bench_root):
    return load_dataset(bench_root)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
