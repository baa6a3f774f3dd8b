import numpy as np
import pytest

from flowdistill.data import SynthConfig, generate_synthetic, make_windows
from flowdistill.exceptions import ContractError, DimensionError, FormatError
from flowdistill.losses import teacher_gate
from flowdistill.teacher import (
    FileTeacher,
    OracleConfig,
    TeacherPredictions,
    dataset_fingerprint,
    export_instruction_prompts,
    load_predictions,
    oracle_teacher,
    read_region_info,
    render_prompt,
    save_predictions,
)


def _pred(shape=(3, 4, 2, 2), fp=0):
    rng = np.random.default_rng(0)
    return TeacherPredictions(rng.uniform(0, 100, size=shape).astype(np.float32), fp)


def test_round_trip_bit_identical(tmp_path):
    pred = _pred(fp=0xDEADBEEF)
    save_predictions(pred, tmp_path / "t.fdtp")
    back = load_predictions(tmp_path / "t.fdtp", pred.dims, 0xDEADBEEF)
    assert back.values.tobytes() == pred.values.tobytes()
    assert back.fingerprint == 0xDEADBEEF


def test_region_count_mismatch(tmp_path):
    save_predictions(_pred((2, 77, 12, 2)), tmp_path / "t.fdtp")
    with pytest.raises(DimensionError):
        load_predictions(tmp_path / "t.fdtp", (2, 263, 12, 2))


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.fdtp"
    save_predictions(_pred(), path)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(FormatError, match="payload"):
        load_predictions(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "t.fdtp"
    save_predictions(_pred(), path)
    path.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        load_predictions(path)


def test_fingerprint_mismatch(tmp_path):
    save_predictions(_pred(fp=1), tmp_path / "t.fdtp")
    with pytest.raises(FormatError, match="fingerprint"):
        load_predictions(tmp_path / "t.fdtp", fingerprint=2)


def test_fingerprint_tracks_split():
    starts = np.arange(10)
    base = dataset_fingerprint(b"meta", (0.1, 0.1, 0.1), starts)
    assert base == dataset_fingerprint(b"meta", (0.1, 0.1, 0.1), starts.copy())
    assert base != dataset_fingerprint(b"meta", (0.2, 0.1, 0.1), starts)
    assert base != dataset_fingerprint(b"meta", (0.1, 0.1, 0.1), starts[1:])
    assert base != dataset_fingerprint(b"meta2", (0.1, 0.1, 0.1), starts)


def test_file_teacher_checks_dims(tmp_path, small_batch):
    B, N, _, H_out, C = small_batch.shape
    save_predictions(_pred((B, N, H_out, C), fp=5), tmp_path / "t.fdtp")
    assert FileTeacher(tmp_path / "t.fdtp", 5)(small_batch).shape == (B, N, H_out, C)
    with pytest.raises(DimensionError):
        FileTeacher(tmp_path / "t.fdtp", 5)(small_batch.subset([0]))


def test_perfect_oracle():
    y = np.random.default_rng(0).uniform(0, 50, size=(2, 3, 4, 2))
    t = oracle_teacher(y, OracleConfig()).values
    assert np.abs(t - y).mean() < 1e-5  # float32 storage


def test_biased_oracle_closes_gate():
    y = np.random.default_rng(0).uniform(0, 99, size=(4, 3, 4, 2)).astype(np.float32).astype(np.float64)
    t = oracle_teacher(y, OracleConfig(bias=100.0)).values
    assert np.abs(t - y).mean() == pytest.approx(100.0)
    # teacher MAE 100: the batch gate closes once the student MAE drops below 90
    assert teacher_gate(y + 89.0, t, y, 10.0, "batch").item() == 0.0
    assert teacher_gate(y + 91.0, t, y, 10.0, "batch").item() == 1.0


def test_oracle_deterministic_and_clipped():
    y = np.zeros((2, 2, 3, 1))
    a = oracle_teacher(y, OracleConfig(noise_std=5.0, seed=3)).values
    b = oracle_teacher(y, OracleConfig(noise_std=5.0, seed=3)).values
    assert a.tobytes() == b.tobytes()
    assert (a >= 0).all() and a.any()


def test_prompt_sentinels():
    series, _, _ = generate_synthetic(SynthConfig(n_regions=4, n_steps=60, seed=0))
    text = render_prompt(series, 0, 1, 12, 12)
    assert "Given the historical data for taxi flow over 12 time steps" in text
    assert "<ST_HIS>" in text and "<ST_PRE>" in text
    assert "January 1, 2021, 00:00, Friday" in text
    assert "with data points recorded at 30-minute intervals" in text


def test_prompt_flow_list_style():
    series, _, _ = generate_synthetic(SynthConfig(n_regions=1, n_steps=30, seed=0))
    values = series.values.copy()
    values[0, :3, 0] = [0, 2, 1]
    series = type(series)(values, series.start_time, series.interval_minutes, series.channels)
    assert "[0 2 1]" in render_prompt(series, 0, 0, 3, 2)


def test_export_one_file_per_window(tmp_path):
    series, _, _ = generate_synthetic(SynthConfig(n_regions=4, n_steps=60, seed=0))
    windows = make_windows(series, 12, 12)[:5]
    paths = export_instruction_prompts(series, windows, tmp_path, 12, 12, {2: "A park."})
    assert len(paths) == len(windows) == len(list(tmp_path.iterdir()))
    text = paths[0].read_text()
    assert text.count("### region") == 4
    assert "A park." in text


def test_export_needs_two_channels(tmp_path):
    series, _, _ = generate_synthetic(SynthConfig(n_regions=4, n_steps=60, n_channels=1, seed=0))
    with pytest.raises(ContractError):
        export_instruction_prompts(series, [0], tmp_path)


def test_region_info_csv(tmp_path):
    path = tmp_path / "info.csv"
    path.write_text('region_id,description\n0,"Offices, shops."\n3,Residential.\n')
    assert read_region_info(path) == {0: "Offices, shops.", 3: "Residential."}
    path.write_text("id,text\n0,x\n")
    with pytest.raises(FormatError):
        read_region_info(path)
