import itertools

import numpy as np
import pytest

from inoculab.data import LabeledDataset
from inoculab.errors import SelectionError, TrainingError
from inoculab.predeploy import (
    GridCellResult,
    GridSearchConfig,
    NoiseSpec,
    augment_noise,
    augment_noise_with_masks,
    grid_matrix,
    holdout_split,
    run_grid,
    select_goodnet,
    write_grid_reports,
)

# Валидационная CA по сетке для атаки фильтром (строки gamma, столбцы alpha); базовая CA 91.34
FSA_BASELINE = 91.34
FSA_ALPHAS = (0.001, 0.003, 0.004, 0.005, 0.006)
FSA_GRID = {
    0.1: (92.55, 86.79, 85.3, 81.86, 83.9),
    0.2: (93.3, 88.27, 87.53, 80, 81.48),
    0.3: (93.39, 88.46, 85.3, 87.72, 83.72),
    0.4: (92.09, 90.41, 86.04, 81.39, 82.41),
    0.5: (92.46, 89.02, 87.06, 82.13, 83.62),
    0.6: (93.58, 88.46, 88.46, 86.13, 84.65),
}


def _cells(grid, alphas):
    return [GridCellResult(alpha=a, gamma=g, valid_ca=ca) for g, row in grid.items() for a, ca in zip(alphas, row)]


def test_fsa_grid_selects_highest_alpha_then_gamma():
    chosen = select_goodnet(_cells(FSA_GRID, FSA_ALPHAS), FSA_BASELINE, 3.0)
    assert (chosen.alpha, chosen.gamma) == (0.004, 0.6)


def test_selection_matches_brute_force():
    rng = np.random.default_rng(0)
    alphas = (1e-4, 2e-4, 3e-4)
    gammas = (0.1, 0.2, 0.3, 0.4)
    for _ in range(1000):
        grid = {g: tuple(rng.uniform(80, 100, size=len(alphas)).round(2)) for g in gammas}
        baseline = float(rng.uniform(85, 100))
        theta = float(rng.choice([0.5, 1.0, 3.0, 5.0]))
        cells = _cells(grid, alphas)
        qualifying = [c for c in cells if baseline - c.valid_ca <= theta]
        if not qualifying:
            with pytest.raises(SelectionError):
                select_goodnet(cells, baseline, theta)
            continue
        expected = max(qualifying, key=lambda c: (c.alpha, c.gamma))
        chosen = select_goodnet(cells, baseline, theta)
        assert (chosen.alpha, chosen.gamma) == (expected.alpha, expected.gamma)


def test_theta_is_inclusive():
    cells = [GridCellResult(alpha=0.1, gamma=0.1, valid_ca=88.0), GridCellResult(alpha=0.2, gamma=0.1, valid_ca=87.0)]
    assert select_goodnet(cells, 90.0, 2.0).alpha == 0.1
    assert select_goodnet(cells, 90.0, 3.0).alpha == 0.2


def test_empty_grid_raises():
    with pytest.raises(SelectionError):
        select_goodnet([], 90.0, 3.0)


@pytest.mark.parametrize("gamma,expected", [(0.1, 78), (0.2, 156), (0.3, 235), (0.4, 313), (0.5, 392), (0.6, 470)])
def test_noise_mask_cardinality(gamma, expected):
    images = np.zeros((5, 28, 28, 1), dtype=np.uint8)
    ds = LabeledDataset(images, np.arange(5) % 2, 2, "blank")
    noisy, masks = augment_noise_with_masks(ds, NoiseSpec(gamma), np.random.default_rng(0))
    assert masks.reshape(5, -1).sum(axis=1).tolist() == [expected] * 5
    assert np.array_equal(noisy.labels, ds.labels)
    assert (noisy.images[~masks] == 0).all()


def test_zero_gamma_is_identity(splits):
    noisy = augment_noise(splits.valid, NoiseSpec(0.0), np.random.default_rng(0))
    assert np.array_equal(noisy.images, splits.valid.images)


def test_noise_statistics():
    ds = LabeledDataset(np.zeros((50, 28, 28, 1), dtype=np.uint8), np.zeros(50, dtype=np.int64), 2, "blank")
    noisy, masks = augment_noise_with_masks(ds, NoiseSpec(0.5), np.random.default_rng(1))
    values = noisy.images[masks].astype(np.float64)
    assert values.mean() == pytest.approx(128.0, abs=0.5)
    assert values.var() == pytest.approx(51.2, rel=0.1)


def test_noise_spec_bounds():
    with pytest.raises(TrainingError):
        NoiseSpec(1.5)
    with pytest.raises(TrainingError):
        NoiseSpec(0.1, variance=-1)


def test_grid_config_alphas():
    cfg = GridSearchConfig()
    assert cfg.alpha_list(1e-3) == pytest.approx((1e-3, 2e-3, 3e-3, 4e-3, 5e-3, 6e-3))
    assert GridSearchConfig(alphas=(0.1, 0.2)).alpha_list(1e-3) == (0.1, 0.2)
    assert GridSearchConfig(use_adaptive_lr=False).alpha_list(1e-3) == (1e-3,)
    with pytest.raises(SelectionError):
        GridSearchConfig(gammas=(0.3, 0.1))
    with pytest.raises(SelectionError):
        GridSearchConfig(holdout_fraction=1.0)


def test_holdout_split_is_stratified(splits):
    fit, holdout = holdout_split(splits.valid, 0.2, seed=0)
    assert holdout.class_counts().tolist() == [8, 8]
    assert fit.class_counts().tolist() == [32, 32]
    assert not set(fit.ids.tolist()) & set(holdout.ids.tolist())


def test_run_grid_on_fixture(tmp_path, tiny_badnet, splits):
    cfg = GridSearchConfig(multiples=(1, 2), gammas=(0.1, 0.3), epochs=1, theta_drop=100.0)
    cells, baseline = run_grid(tiny_badnet, splits.valid, cfg, alpha0=1e-3, evaluator=lambda ckpt: 12.5)
    assert len(cells) == 4
    assert {(c.alpha, c.gamma) for c in cells} == set(itertools.product((1e-3, 2e-3), (0.1, 0.3)))
    assert all(c.checkpoint.meta.role == "badnet" and c.checkpoint.meta.parent == tiny_badnet.id for c in cells)
    assert all(c.asr == 12.5 for c in cells)
    assert 0 <= baseline <= 100

    chosen = select_goodnet(cells, baseline, cfg.theta_drop)
    assert (chosen.alpha, chosen.gamma) == (2e-3, 0.3)
    assert chosen.checkpoint.meta.role == "goodnet"

    written = write_grid_reports(cells, chosen, baseline, tmp_path)
    assert {p.name for p in written} == {"grid_ca.csv", "grid_asr.csv", "selected.json"}
    matrix = grid_matrix(cells)
    assert matrix.shape == (2, 2)
    assert list(matrix.index) == [0.1, 0.3]
