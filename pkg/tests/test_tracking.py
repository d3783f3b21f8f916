from collections import deque
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from thermal_fall.tracking import (
    BBox,
    Detection,
    KalmanParams,
    KalmanState,
    TrackParams,
    Tracker,
    best_detection,
    biggest_contour_box,
    box_match,
    box_selection,
    contour_box,
    foreground_mask,
    kalman_predict,
    kalman_update,
    morph_clean,
    otsu_threshold,
    read_detections,
    read_tracks,
    run_tracker,
    track_step,
    write_detections,
    write_tracks,
)

SHAPE = (64, 64)


def scene(box=None, shape=SHAPE, bg=20, fg=200):
    f = np.full(shape, bg, np.uint8)
    if box is not None:
        f[box.y1 : box.y2, box.x1 : box.x2] = fg
    return f


# ---- otsu ---------------------------------------------------------------

def otsu_oracle(frame):
    """Exhaustive search with exact rationals; first maximum wins."""
    v = frame.ravel().astype(int)
    n = v.size
    best, best_t = None, None
    for t in range(1, 256):
        lo, hi = v[v < t], v[v >= t]
        if lo.size == 0 or hi.size == 0:
            continue
        mu0, mu1 = Fraction(int(lo.sum()), lo.size), Fraction(int(hi.sum()), hi.size)
        var = Fraction(lo.size * hi.size, n * n) * (mu0 - mu1) ** 2
        if best is None or var > best:
            best, best_t = var, t
    return best_t


def test_otsu_matches_exhaustive_oracle():
    rng = np.random.default_rng(0)
    for i in range(1000):
        kind = i % 3
        if kind == 0:
            f = rng.integers(0, 256, (6, 7))
        elif kind == 1:  # few levels, many ties
            f = rng.choice(rng.integers(0, 256, 4), (5, 5))
        else:
            f = np.clip(rng.normal(rng.choice([50, 180], (8, 8)), 15), 0, 255).astype(int)
        if f.min() == f.max():
            continue
        assert otsu_threshold(f.astype(np.uint8)) == otsu_oracle(f), f


def test_otsu_bimodal_and_constant():
    f = np.full((10, 10), 10, np.uint8)
    f[:, 5:] = 200
    t = otsu_threshold(f)
    assert 10 < t <= 200
    assert ((f >= t) == (f == 200)).all()
    assert otsu_threshold(np.full((4, 4), 77, np.uint8)) == 77
    assert not foreground_mask(np.full((4, 4), 77, np.uint8)).any()
    with pytest.raises(ValueError):
        otsu_threshold(np.zeros((0, 3), np.uint8))


# ---- morphology and contours -------------------------------------------

def _shift_or(m, pad):
    p = np.pad(m, 1, constant_values=pad)
    h, w = m.shape
    return [p[1 + dy : 1 + dy + h, 1 + dx : 1 + dx + w] for dy in (-1, 0, 1) for dx in (-1, 0, 1)]


def erode(m):
    return np.logical_and.reduce(_shift_or(m, True))


def dilate(m):
    return np.logical_or.reduce(_shift_or(m, False))


def test_morph_clean_examples():
    m = np.zeros((20, 20), bool)
    m[3, 3] = True
    assert not morph_clean(m).any()
    m = np.zeros((20, 20), bool)
    m[5:15, 5:15] = True
    np.testing.assert_array_equal(morph_clean(m), m)
    m[9, 9] = False
    assert morph_clean(m)[9, 9]


def test_morph_clean_matches_shift_oracle(rng):
    for _ in range(100):
        m = rng.random((16, 18)) < rng.uniform(0.2, 0.8)
        expect = erode(dilate(dilate(erode(m))))
        np.testing.assert_array_equal(morph_clean(m), expect)


def flood_fill_boxes(mask):
    """(area, box) of every 8-connected component, by BFS."""
    h, w = mask.shape
    seen = np.zeros_like(mask)
    out = []
    for y in range(h):
        for x in range(w):
            if not mask[y, x] or seen[y, x]:
                continue
            q, pts = deque([(y, x)]), []
            seen[y, x] = True
            while q:
                cy, cx = q.popleft()
                pts.append((cy, cx))
                for dy in (-1, 0, 1):
                    for dx in (-1, 0, 1):
                        ny, nx = cy + dy, cx + dx
                        if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not seen[ny, nx]:
                            seen[ny, nx] = True
                            q.append((ny, nx))
            ys, xs = zip(*pts)
            out.append((len(pts), BBox(min(xs), min(ys), max(xs) + 1, max(ys) + 1)))
    return out


def test_biggest_contour_matches_flood_fill(rng):
    checked = 0
    for _ in range(300):
        m = rng.random((15, 15)) < 0.3
        comps = flood_fill_boxes(m)
        if not comps:
            assert biggest_contour_box(m) is None
            continue
        areas = sorted((a for a, _ in comps), reverse=True)
        if len(areas) > 1 and areas[0] == areas[1]:
            continue  # tie between components; any is valid
        assert biggest_contour_box(m) == max(comps, key=lambda c: c[0])[1]
        checked += 1
    assert checked >= 100


def test_biggest_contour_dominance_and_empty():
    m = np.zeros((30, 30), bool)
    m[2:7, 2:12] = True  # 50
    m[20:24, 20:25] = True  # 20
    assert biggest_contour_box(m) == BBox(2, 2, 12, 7)
    assert biggest_contour_box(np.zeros((5, 5), bool)) is None
    # diagonal neighbours join
    d = np.eye(6, dtype=bool)
    assert biggest_contour_box(d) == BBox(0, 0, 6, 6)


def test_contour_box_of_scene():
    box = BBox(10, 20, 22, 44)
    assert contour_box(scene(box)) == box
    assert contour_box(scene()) is None


# ---- boxes and matching ------------------------------------------------

def test_bbox_validation_and_clipping():
    with pytest.raises(ValueError):
        BBox(3, 0, 3, 5)
    assert BBox.from_corners((-3.2, 1.6, 70, 30.4), SHAPE) == BBox(0, 2, 64, 30)
    assert BBox.from_corners((70, 1, 80, 5), SHAPE) is None


def test_box_match_examples():
    a = BBox(10, 10, 20, 20)
    assert box_match(a, a)
    assert not box_match(a, BBox(40, 40, 50, 50))
    big = BBox(5, 5, 25, 25)  # 4x area, IoU 0.25
    assert a.iou(big) == pytest.approx(0.25)
    assert box_match(a, big) and box_match(big, a)
    assert box_match(a, BBox(16, 10, 26, 20))  # IoU 0.25, equal areas
    # IoU 0.111 but area ratio 0.2 and only 60% inside
    assert not box_match(a, BBox(17, 10, 22, 14))
    assert not box_match(a, BBox(19, 19, 60, 60))


boxes = st.tuples(st.integers(0, 40), st.integers(0, 40), st.integers(1, 24),
                  st.integers(1, 24)).map(lambda t: BBox(t[0], t[1], t[0] + t[2], t[1] + t[3]))


@given(boxes, boxes)
def test_box_match_symmetric(a, b):
    assert box_match(a, b) == box_match(b, a)


def test_box_selection():
    d, c = BBox(0, 0, 10, 10), BBox(1, 1, 9, 9)
    assert box_selection(d, c) == c
    assert box_selection(d, d) == d


def test_best_detection_threshold():
    dets = [Detection(BBox(0, 0, 5, 5), 0.29), Detection(BBox(1, 1, 6, 6), 0.5),
            Detection(BBox(2, 2, 7, 7), 0.3)]
    assert best_detection(dets) == BBox(1, 1, 6, 6)
    assert best_detection(dets[:1]) is None
    assert best_detection([dets[2]]) == BBox(2, 2, 7, 7)


# ---- kalman ------------------------------------------------------------

def test_constant_velocity_recovered():
    p = KalmanParams(process_noise=1e-4, measurement_noise=1e-6)
    s = KalmanState.initial(BBox(0, 10, 10, 20), p)
    for k in range(1, 6):
        s = kalman_update(kalman_predict(s, p), BBox(2 * k, 10, 10 + 2 * k, 20), p)
    np.testing.assert_allclose(s.x[4:], [2, 0, 2, 0], atol=1e-3)


def test_stationary_prediction():
    tr = Tracker.initialize(BBox(5, 6, 15, 26), SHAPE)
    for _ in range(3):
        tr.kalman_filter(BBox(5, 6, 15, 26))
    assert tr.predict() == BBox(5, 6, 15, 26)


def test_covariance_stays_symmetric_psd(rng):
    s = KalmanState.initial(BBox(10, 10, 20, 20))
    for _ in range(100):
        s = kalman_predict(s)
        if rng.random() < 0.7:
            x1, y1 = rng.integers(0, 40, 2)
            s = kalman_update(s, BBox(x1, y1, x1 + rng.integers(1, 20), y1 + rng.integers(1, 20)))
        np.testing.assert_allclose(s.P, s.P.T, atol=1e-12)
        assert np.linalg.eigvalsh(s.P).min() >= 1e-9 * (1 - 1e-6)


# ---- track_step branches -----------------------------------------------

def test_detection_initializes_tracker():
    det = BBox(10, 10, 20, 30)
    tr, res = track_step(None, scene(), det)
    assert res.box == det and res.source == "detect"
    assert tr is not None and tr.get_current_box() == det and tr.losses == 0


def test_detection_refined_by_contour():
    person = BBox(12, 12, 20, 30)
    tr, res = track_step(None, scene(person), BBox(10, 10, 22, 32))
    assert res == type(res)(person, "contour")
    assert tr.get_current_box() == person


def test_detection_refined_by_track_box():
    tr, _ = track_step(None, scene(), BBox(10, 10, 20, 30))
    current = tr.get_current_box()
    tr, res = track_step(tr, scene(), BBox(9, 11, 21, 31))
    assert res.source == "track" and res.box == current
    assert tr.losses == 0


def test_unmatched_detection_reinitializes():
    tr, _ = track_step(None, scene(), BBox(2, 2, 10, 10))
    tr.losses = 3
    far = BBox(40, 40, 50, 60)
    tr2, res = track_step(tr, scene(), far)
    assert res.box == far and res.source == "detect"
    assert tr2 is not tr and tr2.losses == 0 and tr2.get_current_box() == far


def test_detection_resets_losses():
    tr, _ = track_step(None, scene(), BBox(10, 10, 20, 30))
    for _ in range(4):
        tr, _ = track_step(tr, scene(), None)
    assert tr.losses == 4
    tr, _ = track_step(tr, scene(), BBox(10, 10, 20, 30))
    assert tr.losses == 0


def test_contour_assisted_coasting():
    person = BBox(10, 10, 20, 30)
    tr, _ = track_step(None, scene(person), person)
    tr, res = track_step(tr, scene(person), None)
    assert res == type(res)(person, "contour")
    assert tr.losses == 0.5


def test_blind_coasting():
    tr, _ = track_step(None, scene(), BBox(10, 10, 20, 30))
    tr, res = track_step(tr, scene(), None)
    assert res.source == "track" and res.box == BBox(10, 10, 20, 30)
    assert tr.losses == 1


def test_contour_far_from_prediction_is_ignored():
    tr, _ = track_step(None, scene(), BBox(2, 2, 10, 12))
    tr, res = track_step(tr, scene(BBox(40, 40, 60, 60)), None)
    assert res.source == "track" and tr.losses == 1


def test_termination_after_losses_exceed_max_age():
    tr, _ = track_step(None, scene(), BBox(10, 10, 20, 30))
    for k in range(20):
        tr, res = track_step(tr, scene(), None)
        assert tr is not None and res.box is not None, k
    assert tr.losses == 20
    tr, res = track_step(tr, scene(), None)
    assert tr is None and res.box is None and res.source == "none"
    # nothing to coast on afterwards
    tr, res = track_step(tr, scene(), None)
    assert tr is None and res.box is None


def test_termination_with_half_losses():
    person = BBox(10, 10, 20, 30)
    tr, _ = track_step(None, scene(person), person)
    for _ in range(40):
        tr, res = track_step(tr, scene(person), None)
        assert res.source == "contour"
    assert tr.losses == 20
    tr, res = track_step(tr, scene(person), None)
    assert tr is None and res.box is None


# ---- run_tracker scenes ------------------------------------------------

def moving_scene(n=30, gap=()):
    frames, dets, truth = [], {}, []
    for k in range(n):
        b = BBox(5 + k, 15, 15 + k, 40)
        frames.append(scene(b))
        truth.append(b)
        if k not in gap:
            loose = BBox(b.x1 - 2, b.y1 - 2, b.x2 + 2, b.y2 + 2)
            dets[k] = [Detection(loose, 0.9), Detection(BBox(0, 0, 4, 4), 0.2)]
    return frames, dets, truth


def test_oracle_detections_cover_centroid_and_keep_losses_zero():
    frames, dets, truth = moving_scene()
    tr = None
    for k, f in enumerate(frames):
        tr, res = track_step(tr, f, best_detection(dets[k]))
        cx, cy = truth[k].center
        assert res.box.x1 <= cx < res.box.x2 and res.box.y1 <= cy < res.box.y2
        assert tr.losses == 0


def test_empty_scene_gives_no_boxes():
    out = run_tracker([scene() for _ in range(10)], {})
    assert all(r.box is None and r.source == "none" for r in out)


def test_five_frame_gap_bridged_by_contours():
    frames, dets, truth = moving_scene(gap=range(10, 15))
    out = run_tracker(frames, dets)
    assert all(r.box is not None for r in out)
    assert [out[k].source for k in range(10, 15)] == ["contour"] * 5
    for k in range(10, 15):
        assert out[k].box == truth[k]


def test_low_confidence_detections_are_ignored():
    frames, dets, _ = moving_scene(n=5)
    low = {k: [Detection(d[0].box, 0.1)] for k, d in dets.items()}
    assert all(r.box is None for r in run_tracker(frames, low))


def test_boxes_valid_and_in_bounds(rng):
    for _ in range(10):
        frames, dets = [], {}
        for k in range(25):
            x, y = rng.integers(-5, 60, 2)
            b = BBox.from_corners((x, y, x + rng.integers(3, 20), y + rng.integers(3, 20)), SHAPE)
            frames.append(scene(b) if b is not None and rng.random() < 0.7 else scene())
            if b is not None and rng.random() < 0.6:
                dets[k] = [Detection(b, float(rng.random()))]
        for r in run_tracker(frames, dets):
            assert r.box is None or r.box.within(SHAPE)


def test_run_tracker_deterministic():
    frames, dets, _ = moving_scene(gap=range(5, 9))
    assert run_tracker(frames, dets) == run_tracker(frames, dets)


def test_params_from_dict():
    p = TrackParams.from_dict({"max_age": 5, "kalman": {"measurement_noise": 2.0}})
    assert p.max_age == 5 and p.kalman.measurement_noise == 2.0
    assert p.match.iou == 0.3


# ---- csv ---------------------------------------------------------------

def test_detection_and_track_csv_round_trip(tmp_path):
    frames, dets, _ = moving_scene(n=12, gap=range(3, 6))
    write_detections(tmp_path / "d.csv", {"v1": dets})
    back = read_detections(tmp_path / "d.csv")["v1"]
    assert sorted(back) == sorted(dets)
    assert back[0][0].box == dets[0][0].box
    out = run_tracker(frames, dets)
    out[-1] = type(out[-1])(None, "none")
    write_tracks(tmp_path / "t.csv", {"v1": out})
    assert read_tracks(tmp_path / "t.csv")["v1"] == [r.box for r in out]


def test_detection_csv_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("video_id,frame_idx,x1\n")
    with pytest.raises(ValueError, match="missing columns"):
        read_detections(p)
    p.write_text("video_id,frame_idx,x1,y1,x2,y2,confidence\nv,0,5,5,5,9,0.4\n")
    with pytest.raises(ValueError, match=":2:"):
        read_detections(p)
