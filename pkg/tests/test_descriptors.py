import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from iface_sentinel.dataset import PredictionInstance
from iface_sentinel.descriptors import (
    DescriptorError,
    DescriptorSeries,
    EndpointConfig,
    EndpointDetector,
    FrameRecord,
    JumpDetector,
    OnsetDetector,
    StatRegion,
    detect_endpoint,
    detect_jumps,
    detect_onset,
    frame_pair_distance,
    interface_height,
    mask_jumps,
    moving_median,
    pair_distance_series,
    read_csv,
    smooth,
    solid_area_series,
    theil_sen_slope,
)
from iface_sentinel.fixtures import crystallization_trace
from iface_sentinel.geometry import BBox, BinaryMask, rle_encode

W, H = 64, 120
REGION = StatRegion(BBox(0, 0, W, H), "all")
GL, LL, SOLID = 24, 25, 30


def band(rows, cols=(10, 50)):
    bits = np.zeros((H, W), bool)
    for r in rows:
        bits[r, cols[0]:cols[1]] = True
    return BinaryMask(bits)


def inst(cat, mask, score=0.9, frame=0):
    return PredictionInstance(frame, cat, rle_encode(mask), score)


# --- heights and series ------------------------------------------------------

def test_height_line_and_band():
    assert interface_height(band([40]), REGION) == 40.0
    assert interface_height(band([39, 40, 41]), REGION) == 40.0


def test_height_tilted_band_matches_enumeration():
    bits = np.zeros((H, W), bool)
    for x in range(W):
        y = 20 + x // 3
        bits[y:y + 3, x] = True
    region = BBox(5, 0, 40, H)
    rows = [y for y in range(H) for x in range(5, 40) if bits[y, x]]
    assert interface_height(BinaryMask(bits), region) == pytest.approx(sum(rows) / len(rows), abs=1e-12)


def test_height_outside_region_errors():
    with pytest.raises(DescriptorError):
        interface_height(band([40]), BBox(0, 50, W, 60))


def test_pair_distance_and_gaps():
    frames = [
        FrameRecord(0.0, 0, (inst(GL, band([30])), inst(LL, band([80])))),
        FrameRecord(0.1, 1, (inst(GL, band([30])),)),
        FrameRecord(0.2, 2, (inst(GL, band([31])), inst(LL, band([70])))),
    ]
    s = pair_distance_series(frames, GL, LL, REGION)
    assert s.t == (0.0, 0.2) and s.values == (50.0, 39.0)


def test_pair_distance_uses_highest_score():
    f = FrameRecord(0.0, 0, (inst(GL, band([30]), 0.4), inst(GL, band([10]), 0.8),
                             inst(LL, band([60]), 0.5)))
    assert frame_pair_distance(f, GL, LL, REGION) == 50.0


def test_scripted_converging_stream():
    script = [(i / 10, 30, 90 - 4 * i) for i in range(12)]
    frames = [FrameRecord(t, i, (inst(GL, band([a])), inst(LL, band([b]))))
              for i, (t, a, b) in enumerate(script)]
    s = pair_distance_series(frames, GL, LL, REGION)
    assert s.values == tuple(float(b - a) for _, a, b in script)


@settings(max_examples=30, deadline=None)
@given(st.integers(5, 50), st.integers(60, 100), st.integers(-8, 8), st.integers(-10, 10))
def test_translation_properties(a, b, dx, dy):
    up, lo = band([a, a + 1]), band([b])
    base = frame_pair_distance(FrameRecord(0, 0, (inst(GL, up), inst(LL, lo))), GL, LL, REGION)
    shift = lambda m, y, x: BinaryMask(np.roll(np.roll(m.bits, y, 0), x, 1))
    moved = frame_pair_distance(
        FrameRecord(0, 0, (inst(GL, shift(up, 0, dx)), inst(LL, shift(lo, 0, dx)))), GL, LL, REGION)
    assert moved == base
    lowered = frame_pair_distance(FrameRecord(0, 0, (inst(GL, up), inst(LL, shift(lo, dy, 0)))), GL, LL, REGION)
    assert lowered == base + dy


def square(x, y, s):
    bits = np.zeros((H, W), bool)
    bits[y:y + s, x:x + s] = True
    return BinaryMask(bits)


def test_solid_area():
    empty = [FrameRecord(i * 0.1, i) for i in range(4)]
    assert solid_area_series(empty, [SOLID], REGION).values == (0.0,) * 4
    one = [FrameRecord(0, 0, (inst(SOLID, square(3, 3, 5)),))]
    assert solid_area_series(one, [SOLID], REGION).values == (25.0,)
    a, b = square(0, 0, 6), square(3, 3, 6)
    two = [FrameRecord(0, 0, (inst(SOLID, a), inst(SOLID, b)))]
    assert solid_area_series(two, [SOLID], REGION).values == (float((a.bits | b.bits).sum()),)
    clipped = solid_area_series(two, [SOLID], BBox(0, 0, 3, 3)).values
    assert clipped == (9.0,)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_solid_area_monotone_under_growth(seed):
    rng = np.random.default_rng(seed)
    bits = rng.random((H, W)) < 0.05
    bits[0, 0] = True
    grown = bits | (rng.random((H, W)) < 0.05)
    region = BBox(4, 10, 50, 90)
    f = lambda m: solid_area_series([FrameRecord(0, 0, (inst(SOLID, BinaryMask(m)),))], [SOLID], region).values[0]
    assert f(grown) >= f(bits)


def test_series_validation_and_csv(tmp_path):
    with pytest.raises(DescriptorError):
        DescriptorSeries.of("x", [0, 0], [1, 2])
    with pytest.raises(DescriptorError):
        DescriptorSeries.of("x", [0, 1], [1, float("nan")])
    s = DescriptorSeries.of("x", [0, 0.1, 1 / 3], [1.5, -2, 7.25])
    assert s.to_csv().splitlines()[0] == "t_seconds,value"
    s.save_csv(tmp_path / "s.csv")
    assert read_csv(tmp_path / "s.csv", "x") == s


# --- smoothing -----------------------------------------------------------------

def test_smooth_examples():
    s = DescriptorSeries.of("x", range(7), [3, 3, 3, 50, 3, 3, 3])
    assert smooth(s, 1) == s
    assert smooth(s, 3).values == (3.0,) * 7
    c = DescriptorSeries.of("x", range(5), [2] * 5)
    assert smooth(c, 5) == c
    with pytest.raises(DescriptorError):
        moving_median([1, 2], 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=40), st.sampled_from([1, 3, 5, 7]))
def test_smooth_stays_within_window_range(vals, win):
    out = moving_median(vals, win)
    h = win // 2
    for i, o in enumerate(out):
        part = vals[max(0, i - h):i + h + 1]
        assert min(part) <= o <= max(part)


def test_theil_sen():
    t = np.arange(10.0)
    v = 3 * t + 1
    v[4] = 1000
    assert theil_sen_slope(t, v) == pytest.approx(3.0)


# --- endpoint --------------------------------------------------------------------

def test_endpoint_constant_and_linear():
    t = np.arange(0, 4, 0.1)
    r = detect_endpoint((t, np.full_like(t, 7.0)))
    assert r.t_star == 0.0
    assert detect_endpoint((t, -10 * t), 1.0, 2.0, 3).t_star is None


def test_endpoint_window_edges():
    # windows are half-open; a window is judged only once a later sample exists
    t = np.array([0.0, 0.5, 1.0])
    det = EndpointDetector(EndpointConfig(1.0, 1.0, 1))
    assert det.push(0.0, 0.0) is None
    assert det.push(0.5, 0.0) is None
    assert det.push(1.0, 0.0).t_star == 0.0
    sparse = (np.array([0.0, 2.0, 4.0, 6.0]), np.zeros(4))
    assert detect_endpoint(sparse, 1.0, 1.0, 1).t_star is None


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-100, 100), st.floats(0, 50))
def test_endpoint_offset_and_shift_invariance(seed, c, dt):
    rng = np.random.default_rng(seed)
    t = np.arange(60) / 10
    v = np.where(t < 3, 50 - 10 * t, 20) + rng.normal(0, 0.5, t.size)
    base = detect_endpoint((t, v), 1.0, 2.0, 3)
    assert detect_endpoint((t, v + c), 1.0, 2.0, 3).t_star == base.t_star
    shifted = detect_endpoint((t + dt, v), 1.0, 2.0, 3).t_star
    if base.t_star is None:
        assert shifted is None
    else:
        # float time shifts can move a sample across a window edge only at the ulp level
        assert shifted == pytest.approx(base.t_star + dt, abs=1e-9)


def test_endpoint_result_in_span():
    t = np.arange(50) / 10
    r = detect_endpoint((t, np.abs(np.sin(t))), 0.5, 0.5, 2)
    assert r.t_star is None or t[0] <= r.t_star <= t[-1]


# --- onset and jumps ------------------------------------------------------------

def test_onset_examples():
    t = np.arange(10) / 10
    assert detect_onset((t, np.zeros(10))) is None
    blip = np.zeros(10)
    blip[3:5] = 50
    assert detect_onset((t, blip), 5, 3) is None
    step = np.where(t >= 0.4, 20.0, 0.0)
    assert detect_onset((t, step), 5, 3) == 0.4


def test_jumps_ramp_and_step():
    t = np.arange(300) / 30
    assert detect_jumps((t, 5 * t)) == []
    rng = np.random.default_rng(3)
    noise = 2.0
    v = 100 + rng.normal(0, noise, t.size)
    v[t >= 6.6 - 1e-9] += 100 * noise
    jumps = detect_jumps((t, v))
    assert [j.t for j in jumps] == [t[198]]
    fixed = mask_jumps(DescriptorSeries.of("v", t, v), jumps)
    assert abs(np.mean(fixed.values[200:]) - 100) < 5


def test_jump_then_onset_pipeline():
    for seed in range(20):
        t, v = crystallization_trace(seed)
        s = DescriptorSeries.of("a", t, v, "pixels^2")
        jumps = detect_jumps(s)
        assert [round(j.t, 6) for j in jumps] == [6.6]
        onset = detect_onset(mask_jumps(s, jumps))
        assert abs(onset - 1.5) <= 0.2


def test_incremental_matches_batch():
    t, v = crystallization_trace(4)
    jd, od = JumpDetector(), OnsetDetector()
    fired = []
    for ti, vi in zip(t, v):
        jd.push(ti, vi)
        if od.push(ti, jd.corrected(vi)) is not None:
            fired.append(ti)
    s = DescriptorSeries.of("a", t, v)
    batch = detect_jumps(s)
    assert jd.jumps == batch
    assert od.t_onset == detect_onset(mask_jumps(s, batch))
    assert fired and fired[0] >= od.t_onset


def test_detector_preconditions():
    with pytest.raises(DescriptorError):
        detect_endpoint(([0.0], [1.0]))
    with pytest.raises(DescriptorError):
        detect_jumps(([0.0, 1.0], [1.0, 2.0]))
    with pytest.raises(DescriptorError):
        detect_onset(([], []))
    with pytest.raises(DescriptorError):
        EndpointConfig(0, 1, 1)
    with pytest.raises(DescriptorError):
        FrameRecord(-1.0, 0)
