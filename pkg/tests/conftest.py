import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from cytomatch.panel import CellType, MarkerLevels, PanelConfig

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIG_DIR = REPO_ROOT / "configs"

MARKERS = ("FS", "SS", "CD56", "CD16", "CD3", "CD8", "CD4")

SIGN_TABLE = {
    "granulocyte":      "++-+---",
    "monocyte":         "+--+---",
    "helper_t_cell":    "----+-+",
    "cytotoxic_t_cell": "----++-",
    "b_cell":           "-------",
    "nk_cell":          "--++---",
}

POSITIVE_LEVELS = (800, 680, 500, 350, 550, 750, 650)
NEGATIVE_LEVELS = (400, 400, 240, 130, 200, 170, 200)


def build_reference_panel() -> PanelConfig:
    cell_types = tuple(
        CellType(name, {m: s for m, s in zip(MARKERS, signs)})
        for name, signs in SIGN_TABLE.items()
    )
    levels = {
        m: MarkerLevels(float(neg), float(pos))
        for m, neg, pos in zip(MARKERS, NEGATIVE_LEVELS, POSITIVE_LEVELS)
    }
    return PanelConfig(MARKERS, cell_types, levels)


@pytest.fixture(scope="session")
def reference_panel() -> PanelConfig:
    return build_reference_panel()


@pytest.fixture(scope="session")
def toy_pattern():
    from cytomatch.data import FilePattern

    return FilePattern(("c",), ("s1",), ("s2",))


@pytest.fixture(scope="session")
def toy_means() -> np.ndarray:
    from cytomatch.evaluate import TOY_MEANS

    return TOY_MEANS.copy()
