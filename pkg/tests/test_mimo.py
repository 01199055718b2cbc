"""
Test cases for MIMO instance generation, classical detectors and the BER harness.
"""

import logging

import numpy as np
import pandas as pd
import pytest

from binflow.core.ndmath import Rng
from binflow.core.tables import BER_COLUMNS
from binflow.errors import DomainError
from binflow.models import MimoConfig, ObjectiveConfig
from binflow.utils.helpers import monte_carlo_sigma
from binflow.tasks.mimo import (
    MimoBatch, MimoInstance, MimoSource, ber_sweep, candidate_table, condition_vector, condition_width,
    detect_lmmse, detect_map, detect_zf, detect_zf_flagged, gen_mimo, gen_mimo_batch, monotone_in_snr,
    ordering_violations, run_mimo, sweep_checks,
)


def test_gen_mimo_deterministic():
    """Test equal seeds give identical instances"""
    first = gen_mimo(Rng(1), 2, 10.0, 5)
    second = gen_mimo(Rng(1), 2, 10.0, 5)
    assert len(first) == 5
    for a, b in zip(first, second):
        assert np.array_equal(a.H, b.H)
        assert np.array_equal(a.y, b.y)
    assert first[0].H.shape == (4, 4)
    assert abs(first[0].noise_var - 0.1) < 1e-15


def test_gen_mimo_noiseless_limit():
    """Test y equals H x as the noise vanishes"""
    batch = gen_mimo_batch(Rng(2), 2, 300.0, 10)
    assert np.allclose(batch.y, np.einsum("bij,bj->bi", batch.H, batch.x), atol=1e-12)


def test_gen_mimo_energy_normalization():
    """Test unit received energy per symbol and noise at the stated variance"""
    batch = gen_mimo_batch(Rng(3), 2, 0.0, 10_000)
    signal = np.einsum("bij,bj->bi", batch.H, batch.x)
    assert abs(np.mean(signal ** 2) - 1.0) < 0.02
    assert abs(np.var(batch.y - signal) - 1.0) < 0.02
    assert set(np.unique(batch.x)) == {-1.0, 1.0}


def test_gen_mimo_rejects_bad_sizes():
    """Test N and count must be positive"""
    with pytest.raises(DomainError):
        gen_mimo(Rng(0), 0, 10.0, 3)
    with pytest.raises(DomainError):
        gen_mimo(Rng(0), 2, 10.0, 0)


def test_identity_channel_noiseless():
    """Test every detector recovers x through H = I without noise"""
    x = np.array([1.0, -1.0, -1.0, 1.0])
    instance = MimoInstance(H=np.eye(4), x=x, noise_var=0.0, y=x.copy())
    for detect in (detect_zf, detect_lmmse, detect_map):
        bits = detect(instance)
        assert bits.shape == (4,)
        assert np.array_equal(bits, x)


def test_lmmse_approaches_zf():
    """Test LMMSE and ZF decisions agree at high SNR"""
    batch = gen_mimo_batch(Rng(4), 2, 60.0, 500)
    agreement = np.mean(detect_lmmse(batch) == detect_zf(batch))
    assert agreement > 0.99


def test_zf_singular_channel(caplog):
    """Test a rank-deficient channel falls back to the ridge with a warning"""
    H = np.eye(2)
    H[:, 1] = 0.0
    instance = MimoInstance(H=H, x=np.array([1.0, 1.0]), noise_var=0.1, y=np.array([1.0, 0.0]))
    with caplog.at_level(logging.WARNING):
        bits = detect_zf(instance)
    assert bits[0] == 1.0
    assert "singular" in caplog.text

    flagged, singular = detect_zf_flagged(instance)
    assert singular
    assert np.array_equal(flagged, bits)
    regular = gen_mimo_batch(Rng(10), 1, 10.0, 3)
    assert not detect_zf_flagged(regular)[1].any()


def test_map_limit_and_candidates():
    """Test the candidate table and the search-size limit"""
    table = candidate_table(3)
    assert table.shape == (8, 3)
    assert len({tuple(row) for row in table}) == 8
    big = MimoInstance(H=np.eye(18), x=np.ones(18), noise_var=0.1, y=np.ones(18))
    with pytest.raises(DomainError):
        detect_map(big)


def test_detector_ordering():
    """Test MAP <= LMMSE <= ZF on shared instances"""
    table = ber_sweep({"zf": detect_zf, "lmmse": detect_lmmse, "map": detect_map}, 2,
                      [0.0, 4.0, 8.0], 40_000, Rng(5))
    pivot = table.pivot(index="snr_db", columns="detector", values="ber")
    assert (pivot["map"] <= pivot["lmmse"] + 0.005).all()
    assert (pivot["lmmse"] <= pivot["zf"] + 0.005).all()
    assert pivot["zf"].is_monotonic_decreasing
    for name in ("zf", "lmmse", "map"):
        assert monotone_in_snr(table, name)
    assert ordering_violations(table, ["map", "lmmse", "zf"]) == []
    assert sweep_checks(table) == []


def test_ber_sweep_oracles():
    """Test exact and inverted oracles and the bit budget"""
    table = ber_sweep({"oracle": lambda b: b.x, "flip": lambda b: -b.x}, 2, [0.0, 5.0], 1000, Rng(6))
    assert list(table.columns) == BER_COLUMNS
    assert table.loc[table["detector"] == "oracle", "ber"].tolist() == [0.0, 0.0]
    assert table.loc[table["detector"] == "flip", "ber"].tolist() == [1.0, 1.0]
    assert (table["bit_count"] == 1000).all()


def test_condition_vector_layout():
    """Test [vec(H), y, sigma^2] ordering and width"""
    assert condition_width(2) == 21
    batch = gen_mimo_batch(Rng(7), 2, 10.0, 3)
    cond = condition_vector(batch)
    assert cond.shape == (3, 21)
    assert np.array_equal(cond[:, :16], batch.H.reshape(3, 16))
    assert np.array_equal(cond[:, 16:20], batch.y)
    assert np.allclose(cond[:, 20], 0.1)


def test_mimo_source_snr_range():
    """Test training draws stay inside the SNR range"""
    x, cond = MimoSource(1, (0.0, 12.0)).sample(Rng(8), 200)
    assert x.shape == (200, 2)
    noise_var = cond[:, -1]
    assert noise_var.min() >= 10 ** -1.2 - 1e-15
    assert noise_var.max() <= 1.0


def test_batch_stack_round_trip():
    """Test instances and batches convert both ways"""
    batch = gen_mimo_batch(Rng(9), 1, 3.0, 4)
    restacked = MimoBatch.stack(batch.instances())
    assert np.array_equal(restacked.H, batch.H)
    assert np.array_equal(restacked.noise_var, batch.noise_var)


def test_run_mimo_smoke(tmp_path):
    """Test a tiny run trains each cell and sweeps all detectors"""
    config = MimoConfig(
        n=1, snr_sweep=[0.0, 4.0], steps=5, batch=16, hidden=8, layers=1, embed_dim=8,
        bits_per_point=200, validate_every=5,
        objectives=[ObjectiveConfig(prediction="x_pred", loss="bce"),
                    ObjectiveConfig(prediction="x_pred", loss="v_mse")],
    )
    run = run_mimo(config, tmp_path)
    ber = pd.read_csv(tmp_path / "ber.csv")
    assert set(ber["detector"]) == {"zf", "lmmse", "map", "x_pred-bce", "x_pred-v_mse"}
    assert len(ber) == 10
    assert ber["ber"].between(0.0, 1.0).all()
    assert len(pd.read_csv(tmp_path / "summary.csv")) == 2
    assert (tmp_path / "x_pred-bce" / "trace.csv").exists()
    assert all(path.exists() for path in run.outputs)


def test_run_mimo_without_map():
    """Test disabling MAP drops it from the sweep"""
    config = MimoConfig(n=1, snr_sweep=[2.0], steps=2, batch=8, hidden=8, layers=1, embed_dim=8,
                        bits_per_point=20, map_enabled=False,
                        objectives=[ObjectiveConfig(prediction="x_pred", loss="x_mse")])
    run = run_mimo(config)
    assert set(run.ber_table["detector"]) == {"zf", "lmmse", "x_pred-x_mse"}


def test_random_guess_ber_is_one_half():
    """Test a detector ignoring the channel sits at 0.5 within Monte Carlo error"""
    guesses = Rng(12)
    table = ber_sweep({"guess": lambda b: guesses.bipolar(b.x.shape)}, 2, [0.0, 10.0], 20_000, Rng(13))
    for ber_value in table["ber"]:
        assert abs(ber_value - 0.5) <= 3.0 * monte_carlo_sigma(0.5, 20_000)


def test_sweep_checks_flag_inconsistent_tables():
    """Test rising BER and inverted ordering are reported"""
    rows = pd.DataFrame({
        "snr_db": [0.0, 6.0, 0.0, 6.0],
        "detector": ["zf", "zf", "map", "map"],
        "ber": [0.10, 0.20, 0.30, 0.01],
        "bit_count": [10_000] * 4,
    })
    assert not monotone_in_snr(rows, "zf")
    assert monotone_in_snr(rows, "map")
    assert ordering_violations(rows, ["map", "lmmse", "zf"]) == ["map > zf at 0 dB"]
    assert sweep_checks(rows) == ["map > zf at 0 dB", "zf BER rises with SNR"]
