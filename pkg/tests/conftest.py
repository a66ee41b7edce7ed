import pytest

from dualunc.sample_data import find_mnist, write_mnist_sample

# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
CRITERIA = {
    1: "clean baseline accuracy >= 98.5% within 15 min",
    2: "simulated-expert accuracy 97.1 +/- 1.0%",
    3: "LU changed/unchanged >= 5x on train and test, train unchanged LU <= 0.01",
    4: "EU ratio < LU ratio on test in >= 2 of 3 seeds",
    5: "numerical suite (gradcheck 1e-3, KL quadrature 1e-4, variance 1e-6)",
    6: "constant fusion: LU exactly 0, accuracy within 0.5% of MCDO baseline",
    7: "determinism: identical containers and final-epoch metrics",
    8: "conflicts: LU on conflicted classes >= 3x non-conflicted",
}


class MnistSource:
    def __init__(self, paths, full):
        self.paths = paths
        self.full = full
        self.label = "full MNIST" if full else "4000/1000 real-MNIST sample (mlxtend)"

    def config_kwargs(self):
        return {key: str(p) for key, p in self.paths.items()}


@pytest.fixture(scope="session")
def mnist(tmp_path_factory):
    paths = find_mnist()
    if paths is not None:
        return MnistSource(paths, full=True)
    pytest.importorskip("mlxtend")
    return MnistSource(write_mnist_sample(tmp_path_factory.mktemp("mnist")), full=False)


@pytest.fixture
def acceptance():
    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE[number] = (bool(passed), detail)
        print(f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {CRITERIA[number]} | {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, text in CRITERIA.items():
        if number in ACCEPTANCE:
            passed, detail = ACCEPTANCE[number]
            status = "PASS" if passed else "FAIL"
        else:
            status, detail = "NOT RUN", ""
        terminalreporter.write_line(f"{status:7s} {number}. {text} | {detail}")
