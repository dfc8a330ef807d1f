import os

import numpy as np
import pytest
import torch

from mixtea_kg import ENT_LINKS, FOLD_DIR, SOURCE_TRIPLES, SPLIT_FILES, TARGET_TRIPLES

# six-entity ring per side; target side uses its own relation names and line order
SOURCE_LINES = [
    "s:0\tr:p\ts:1",
    "s:1\tr:q\ts:2",
    "s:2\tr:p\ts:3",
    "s:3\tr:q\ts:4",
    "s:4\tr:p\ts:5",
    "s:5\tr:q\ts:0",
]
TARGET_LINES = [
    "t:0\tu:x\tt:1",
    "t:5\tu:y\tt:0",
    "t:1\tu:y\tt:2",
    "t:4\tu:x\tt:5",
    "t:2\tu:x\tt:3",
    "t:3\tu:y\tt:4",
]
SPLITS = {"train_links": [0, 1], "valid_links": [2], "test_links": [3, 4, 5]}


def write_openea(root, source_lines, target_lines, splits, fold=1):
    os.makedirs(os.path.join(root, FOLD_DIR, str(fold)), exist_ok=True)
    with open(os.path.join(root, SOURCE_TRIPLES), "w", encoding="utf-8") as f:
        f.write("\n".join(source_lines) + "\n")
    with open(os.path.join(root, TARGET_TRIPLES), "w", encoding="utf-8") as f:
        f.write("\n".join(target_lines) + "\n")
    all_ids = sorted(i for ids in splits.values() for i in ids)
    with open(os.path.join(root, ENT_LINKS), "w", encoding="utf-8") as f:
        f.writelines(f"s:{i}\tt:{i}\n" for i in all_ids)
    for name in SPLIT_FILES:
        with open(os.path.join(root, FOLD_DIR, str(fold), name), "w", encoding="utf-8") as f:
            f.writelines(f"s:{i}\tt:{i}\n" for i in splits.get(name, []))
    return str(root)


@pytest.fixture
def toy_dir(tmp_path):
    return write_openea(tmp_path / "toy", SOURCE_LINES, TARGET_LINES, SPLITS)


@pytest.fixture
def toy_dataset(toy_dir):
    from mixtea_kg import build_dataset
    return build_dataset(toy_dir)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def finite_difference():
    """Central differences of a scalar function of one float64 tensor (h = 1e-5)."""

    def numeric_grad(f, x: torch.Tensor, h: float = 1e-5) -> torch.Tensor:
        x = x.detach().clone()
        grad = torch.zeros_like(x)
        flat, gflat = x.view(-1), grad.view(-1)
        for i in range(flat.numel()):
            orig = float(flat[i])
            flat[i] = orig + h
            plus = float(f(x))
            flat[i] = orig - h
            minus = float(f(x))
            flat[i] = orig
            gflat[i] = (plus - minus) / (2 * h)
        return grad

    return numeric_grad


def relative_error(analytic: torch.Tensor, numeric: torch.Tensor) -> float:
    a = analytic.detach().numpy()
    n = numeric.detach().numpy()
    scale = max(np.abs(a).max(), np.abs(n).max(), 1e-12)
    return float(np.abs(a - n).max() / scale)
