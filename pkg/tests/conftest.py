import os

import pytest

from estshift.experiments import DATA_ENV

DEFAULT_MNIST = "/root/data/mnist"


def mnist_dir() -> str:
    return os.environ.get(DATA_ENV, DEFAULT_MNIST)


def have_mnist() -> bool:
    d = mnist_dir()
    return all(os.path.exists(os.path.join(d, f)) for f in
               ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte",
                "train-images-idx3-ubyte", "train-labels-idx1-ubyte"))


# (criterion number, title, passed, detail) for the acceptance summary.
ACCEPTANCE: list = []


def record_criterion(number: int, title: str, passed: bool, detail: str = ""):
    ACCEPTANCE.append((number, title, bool(passed), detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"criterion {number} {'PASS' if passed else 'FAIL'}: {title}"
                                    + (f" | {detail}" if detail else ""))


needs_mnist = pytest.mark.skipif(not have_mnist(), reason=f"MNIST IDX files not found; set {DATA_ENV}")


def write_idx(path, magic: int, dims, payload: bytes):
    with open(path, "wb") as f:
        f.write(magic.to_bytes(4, "big"))
        for d in dims:
            f.write(int(d).to_bytes(4, "big"))
        f.write(payload)


def fake_mnist(root, n_train=300, n_test=1100, seed=0):
    """Synthetic 28x28 IDX files: each class lights a different band of rows."""
    import numpy as np
    rng = np.random.Generator(np.random.Philox(seed))
    for split, n in (("train", n_train), ("t10k", n_test)):
        labels = (np.arange(n) % 10).astype(np.uint8)
        imgs = rng.integers(0, 60, size=(n, 28, 28)).astype(np.uint8)
        for i, c in enumerate(labels):
            imgs[i, 2 * c + 3:2 * c + 6, 4:24] = 200 + rng.integers(0, 55)
        write_idx(os.path.join(root, f"{split}-images-idx3-ubyte"), 0x803, (n, 28, 28), imgs.tobytes())
        write_idx(os.path.join(root, f"{split}-labels-idx1-ubyte"), 0x801, (n,), labels.tobytes())
    return str(root)


@pytest.fixture(scope="session")
def fake_data(tmp_path_factory):
    return fake_mnist(tmp_path_factory.mktemp("mnist"))
