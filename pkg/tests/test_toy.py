"""
Test cases for the low-dimensional stability study.
"""

import numpy as np
import pandas as pd
import pytest

from binflow.core.ndmath import Rng
from binflow.core.tables import SUMMARY_COLUMNS, TOY_BER_COLUMNS
from binflow.models import ObjectiveConfig, TimeSampler, ToyRecipe
from binflow.tasks.toy import (
    BpskSource, GaussianSource, cell_name, make_source, mmse_reference_ber, run_toy,
)
from binflow.utils.helpers import monte_carlo_sigma


@pytest.fixture
def tiny_recipe():
    return ToyRecipe(D=4, steps=20, batch=32, lr=1e-3, hidden=16, layers=1, embed_dim=8,
                     ber_bits=400, t0_grid=[0.2, 0.5, 0.8], bins=4, seed=7)


def test_recipe_objectives():
    """Test default objective sets per data kind"""
    assert len(ToyRecipe().objectives) == 4
    assert len(ToyRecipe(data_kind="gaussian_iid").objectives) == 3
    with pytest.raises(ValueError):
        ToyRecipe(data_kind="gaussian_iid", objectives=[ObjectiveConfig(prediction="x_pred", loss="bce")])


def test_sources():
    """Test source shapes and alphabets"""
    x, cond = BpskSource(5).sample(Rng(0), 200)
    assert x.shape == (200, 5)
    assert cond is None
    assert set(np.unique(x)) == {-1.0, 1.0}

    x, _ = GaussianSource(3).sample(Rng(0), 100_000)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1.0) < 0.02
    assert isinstance(make_source(ToyRecipe(data_kind="gaussian_iid")), GaussianSource)


def test_mmse_reference_ber():
    """Test Q(1) at t0=0.5 and monotone decrease"""
    assert abs(mmse_reference_ber(0.5) - 0.15865525393145707) < 1e-12
    values = [mmse_reference_ber(t) for t in np.linspace(0.1, 0.9, 9)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_cell_name():
    """Test cell directory naming"""
    objective = ObjectiveConfig(prediction="x_pred", loss="v_mse")
    assert cell_name(objective, TimeSampler(kind="logit_normal", s=0.8)) == "x_pred-v_mse__logit_normal"


def test_run_toy_grid(tiny_recipe, tmp_path):
    """Test every cell trains, is summarized and writes its tables"""
    run = run_toy(tiny_recipe, tmp_path)
    assert len(run.cells) == 8
    assert list(run.summary.columns) == SUMMARY_COLUMNS
    assert len(run.summary) == 8
    assert all(path.exists() for path in run.outputs)
    assert (tmp_path / "summary.csv").exists()

    cell = run.cells["x_pred-x_mse__uniform"]
    assert cell.result.completed_steps == 20
    assert list(cell.ber_table.columns) == TOY_BER_COLUMNS
    assert cell.ber_table["bit_count"].tolist() == [400, 400, 400]
    assert cell.ber_table["ber"].between(0.0, 1.0).all()
    for name in ("trace.csv", "history.csv", "binned.csv", "t_hist.csv", "params.bnfm", "ber_t0.csv"):
        assert (tmp_path / cell.name / name).exists()

    t_hist = pd.read_csv(tmp_path / cell.name / "t_hist.csv")
    assert t_hist["count"].sum() == 20


def test_run_toy_gaussian_has_no_ber(tiny_recipe, tmp_path):
    """Test continuous data skips the denoising BER table"""
    recipe = tiny_recipe.model_copy(update={
        "data_kind": "gaussian_iid",
        "objectives": [ObjectiveConfig(prediction="v_pred", loss="v_mse")],
        "samplers": [TimeSampler(kind="uniform")],
    })
    run = run_toy(recipe, tmp_path)
    cell = run.cells["v_pred-v_mse__uniform"]
    assert cell.ber_table is None
    assert not (tmp_path / cell.name / "ber_t0.csv").exists()


def test_run_toy_is_deterministic(tiny_recipe, tmp_path):
    """Test equal seeds give byte-identical tables"""
    recipe = tiny_recipe.model_copy(update={"objectives": [ObjectiveConfig(prediction="x_pred", loss="bce")]})
    run_toy(recipe, tmp_path / "a")
    run_toy(recipe, tmp_path / "b")
    for name in ("summary.csv", "x_pred-bce__uniform/trace.csv", "x_pred-bce__logit_normal/ber_t0.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_run_toy_without_output_dir(tiny_recipe):
    """Test a dry run keeps results in memory only"""
    recipe = tiny_recipe.model_copy(update={
        "objectives": [ObjectiveConfig(prediction="x_pred", loss="x_mse")],
        "samplers": [TimeSampler(kind="uniform")],
    })
    run = run_toy(recipe)
    assert run.outputs == []
    assert run.divergence_events == {}


@pytest.fixture
def short_study():
    recipe = ToyRecipe(
        D=4, steps=400, batch=64, lr=1e-3, hidden=32, layers=1, embed_dim=8, ber_bits=2000,
        t0_grid=[0.5, 0.8], bins=5, seed=3,
        objectives=[ObjectiveConfig(prediction="x_pred", loss="bce"),
                    ObjectiveConfig(prediction="x_pred", loss="v_mse")],
        samplers=[TimeSampler(kind="uniform")],
    )
    return run_toy(recipe)


def test_learned_denoiser_against_reference(short_study):
    """Test the aligned flow never beats the MMSE sign decision and gets close at high t0"""
    table = short_study.cells["x_pred-bce__uniform"].ber_table
    for row in table.itertuples():
        sigma = monte_carlo_sigma(row.reference_ber, row.bit_count)
        assert row.ber >= row.reference_ber - 3.0 * sigma
    assert table.loc[table["t0"] == 0.8, "ber"].item() < 0.1


def test_aligned_ber_not_worse_than_mismatched(short_study):
    """Test aligned BCE BER <= mismatched BER at every t0 within Monte Carlo slack"""
    aligned = short_study.cells["x_pred-bce__uniform"].ber_table
    mismatched = short_study.cells["x_pred-v_mse__uniform"].ber_table
    for ours, theirs in zip(aligned.itertuples(), mismatched.itertuples()):
        theirs_ber = 0.5 if np.isnan(theirs.ber) else theirs.ber
        assert ours.ber <= theirs_ber + 3.0 * monte_carlo_sigma(theirs_ber, theirs.bit_count)


def test_mismatched_uniform_blows_up(short_study):
    """Test the mismatched cell under uniform t records divergence or a 100x gradient ratio"""
    cell = short_study.cells["x_pred-v_mse__uniform"]
    row = short_study.summary.set_index("cell").loc[cell.name]
    assert cell.result.divergence is not None or row["grad_ratio"] >= 100.0
    assert short_study.cells["x_pred-bce__uniform"].result.divergence is None


def test_aligned_gradients_stay_bounded():
    """Test an aligned objective keeps the binned gradient ratio under 10 on a short run"""
    recipe = ToyRecipe(
        D=4, steps=400, batch=64, lr=1e-6, hidden=16, layers=1, embed_dim=8, ber_bits=40,
        t0_grid=[0.5], bins=5, seed=4,
        objectives=[ObjectiveConfig(prediction="x_pred", loss="x_mse")],
        samplers=[TimeSampler(kind="uniform")],
    )
    run = run_toy(recipe)
    row = run.summary.iloc[0]
    assert row["status"] == "COMPLETED"
    assert row["grad_ratio"] < 10.0
