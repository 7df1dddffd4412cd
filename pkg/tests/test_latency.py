import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tierserve.arch import CostBreakdown, get_preset, prefill_cost
from tierserve.latency import (
    A100_FLOPS,
    A100_MEM_BW,
    CalibrationError,
    InsufficientDataError,
    LatencyModel,
    ObservedBatchRecord,
    features,
    fit,
    load_model,
    read_records,
    refit_online,
    relative_errors,
    save_model,
    worst_case_batch_latency,
    write_records,
)


def cost(flops=0, mem=0):
    return CostBreakdown(gemm_flops=flops, gemm_mem=mem)


def synthetic_records(model, n, seed, noise=0.0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        t_f = rng.uniform(1e-4, 0.2)
        t_m = rng.uniform(1e-4, 0.2)
        f, m = t_f * model.flops_cap, t_m * model.mem_bw
        lat = model.predict_raw(f, m) * (1 + noise * rng.standard_normal() if noise else 1.0)
        out.append(ObservedBatchRecord(f, m, max(lat, 1e-9)))
    return out


def test_feature_examples():
    assert features(3, 2, 1, 1) == (5, 3, 2, 3, 1)
    assert features(0, 0, 1, 1) == (0, 0, 0, 0, 1)
    m = LatencyModel()
    assert m.features(cost(A100_FLOPS, A100_MEM_BW)) == (2, 1, 1, 1, 1)


@pytest.mark.parametrize("coeffs,t_m,t_f,expected", [
    ((0, 1, 0, 0, 0), 2, 3, 3.0),
    ((1, 0, 0, 0, 0), 0.002, 0.003, 0.005),
    ((0, 0, 0, 0, 0.25), 7, 11, 0.25),
])
def test_predict_examples(coeffs, t_m, t_f, expected):
    m = LatencyModel(coeffs, flops_cap=1.0, mem_bw=1.0)
    assert m.predict(cost(t_f, t_m)) == pytest.approx(expected, rel=1e-12)


def test_default_is_roofline_plus_launch():
    m = LatencyModel()
    assert m.coeffs == (0.0, 1.0, 0.0, 0.0, 3e-4)
    assert (m.flops_cap, m.mem_bw) == (312e12, 2e12)


def test_negative_prediction_clamped_and_counted(caplog):
    m = LatencyModel((0, 0, 0, 0, -1.0))
    with caplog.at_level(logging.WARNING):
        assert m.predict(cost(1, 1)) == 0.0
        assert m.predict(cost(1, 1)) == 0.0
    assert m.n_clamped == 2
    assert sum("clamping" in r.message for r in caplog.records) == 1


def test_invalid_model():
    with pytest.raises(ValueError):
        LatencyModel((1, 2, 3))
    with pytest.raises(ValueError):
        LatencyModel(flops_cap=0)
    with pytest.raises(ValueError):
        ObservedBatchRecord(1, 1, 0.0)


@given(c=st.lists(st.floats(0, 10), min_size=5, max_size=5),
       f=st.floats(0, 1e16), m=st.floats(0, 1e13), df=st.floats(0, 1e15), dm=st.floats(0, 1e12))
@settings(max_examples=200, deadline=None)
def test_predict_monotone_for_non_negative_coeffs(c, f, m, df, dm):
    model = LatencyModel(tuple(c))
    base = model.predict_raw(f, m)
    assert model.predict_raw(f + df, m) >= base
    assert model.predict_raw(f, m + dm) >= base


def test_fit_round_trip_noise_free():
    truth = LatencyModel((0.3, 0.9, 0.2, 0.1, 2e-4))
    recs = synthetic_records(truth, 200, seed=1)
    model = fit(recs)
    pred = np.array([model.predict_raw(r.flops, r.mem_bytes) for r in recs])
    obs = np.array([r.latency for r in recs])
    assert np.max(np.abs(pred - obs) / obs) < 1e-6
    assert model.train_error < 1e-6


def test_fit_predictions_invariant_along_null_space():
    # shifting mass from c1 onto c3 and c4 leaves every prediction unchanged
    a = LatencyModel((0.5, 1.0, 0.0, 0.0, 1e-4))
    b = LatencyModel((0.0, 1.0, 0.5, 0.5, 1e-4))
    recs = synthetic_records(a, 100, seed=2)
    fa, fb = fit(recs), fit([ObservedBatchRecord(r.flops, r.mem_bytes, b.predict_raw(r.flops, r.mem_bytes))
                             for r in recs])
    for r in recs[:20]:
        assert fa.predict_raw(r.flops, r.mem_bytes) == pytest.approx(fb.predict_raw(r.flops, r.mem_bytes), rel=1e-6)


def test_fit_noisy_held_out_error():
    truth = LatencyModel()
    recs = synthetic_records(truth, 600, seed=3, noise=0.05)
    model = fit(recs[:500])
    err = relative_errors(model, recs[500:])
    assert np.median(err) < 0.10


def test_fit_needs_twenty_records():
    with pytest.raises(InsufficientDataError):
        fit(synthetic_records(LatencyModel(), 5, seed=0))


def test_fit_needs_two_distinct_points():
    recs = [ObservedBatchRecord(1e12, 1e10, 0.01)] * 30
    with pytest.raises(InsufficientDataError):
        fit(recs)


def test_calibration_error_is_distinct():
    assert not issubclass(CalibrationError, InsufficientDataError)


def test_refit_online_examples():
    old = LatencyModel()
    assert refit_online(old, []) is old
    with pytest.raises(ValueError):
        refit_online(old, [], window=10)
    shifted = LatencyModel((0.0, 1.5, 0.0, 0.0, 1e-3))
    stream = synthetic_records(old, 100, seed=4) + synthetic_records(shifted, 200, seed=5)
    new = refit_online(old, stream, window=200)
    recent = stream[-200:]
    assert np.median(relative_errors(new, recent)) <= np.median(relative_errors(old, recent))


def test_refit_keeps_old_model_when_it_is_already_exact():
    old = LatencyModel((0.0, 1.0, 0.0, 0.0, 3e-4))
    recs = synthetic_records(old, 50, seed=6)
    new = refit_online(old, recs, window=50)
    assert new.coeffs == old.coeffs


def test_worst_case_batch_latency():
    arch = get_preset("mistral-7b").arch
    m = LatencyModel()
    with pytest.raises(ValueError):
        worst_case_batch_latency(m, arch, 0)
    assert worst_case_batch_latency(m, arch, 2048) >= worst_case_batch_latency(m, arch, 1024)
    assert worst_case_batch_latency(m, arch, 4096) == m.predict(prefill_cost(arch, [4096]))


def test_record_csv_round_trip(tmp_path):
    recs = synthetic_records(LatencyModel(), 25, seed=7)
    recs[0] = ObservedBatchRecord(recs[0].flops, recs[0].mem_bytes, recs[0].latency, 2, 3, 400, 3)
    path = tmp_path / "records.csv"
    write_records(path, recs)
    assert read_records(path) == recs


def test_record_csv_reports_line_numbers(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("flops,mem_bytes,latency_s,b_p,b_d,prefill_tokens,decode_tokens\n1,2,0.1,0,0,0,0\n1,x,0.1,0,0,0,0\n")
    with pytest.raises(ValueError, match=":3:"):
        read_records(path)


def test_model_file_round_trip(tmp_path):
    m = LatencyModel((0.1, 0.9, 0.0, 0.2, 1e-4), 1e14, 1e12, train_error=0.03)
    path = tmp_path / "model.toml"
    save_model(path, m)
    back = load_model(path)
    assert back.coeffs == m.coeffs and back.flops_cap == m.flops_cap and back.mem_bw == m.mem_bw
    assert back.train_error == m.train_error
