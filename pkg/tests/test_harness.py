import dataclasses
import json
import statistics

import numpy as np
import pytest

from tissuescan.cli import EXIT_CONFIG, EXIT_IO, EXIT_OK, EXIT_TRACKING, main
from tissuescan.errors import UndefinedCorrelationError
from tissuescan.harness import (EmptyRecordError, ExperimentAborted, ExperimentConfig, MetricsRecord, NccSeries,
                                load_config, ncc, ncc_flagged, parse_config_text, plan_occlusion, read_report_rows,
                                run_ncc_stability, run_servo_accuracy, run_tracking_accuracy, run_tracking_pass,
                                write_report)
from tissuescan.phantom import Occluder, polygon_mask

QUIET = dict(noise_sigma_mm=0.0, image_noise=0.0)


def track(**kw):
    return ExperimentConfig(kind="tracking-accuracy", **kw)


def servo(**kw):
    return ExperimentConfig(kind="servo-accuracy", **kw)


# NCC

def test_ncc_examples(rng):
    a = rng.normal(size=(16, 16))
    assert ncc(a, a) == pytest.approx(1.0)
    assert ncc(a, -a + 7.0) == pytest.approx(-1.0)
    with pytest.raises(UndefinedCorrelationError):
        ncc(a, np.zeros_like(a))
    assert ncc_flagged(a, np.zeros_like(a)) == (0.0, True)
    with pytest.raises(ValueError):
        ncc(a, a[:4])


# Config

def test_config_parsing(tmp_path):
    text = """
    # trial setup
    profile = 3
    axis = free          # free-form walk
    duration_s = 12.5
    motion_compensation = off
    tracker.roi_count = 9
    tracker.hsv_low = 0, 0.3, 0.1
    control.stale_timeout_s = 0.25
    """
    cfg = parse_config_text("\n".join(line.strip() for line in text.splitlines()))
    assert (cfg.profile, cfg.axis, cfg.duration_s, cfg.motion_compensation) == (3, "free", 12.5, False)
    assert cfg.tracker.roi_count == 9 and cfg.tracker.hsv_low == (0.0, 0.3, 0.1)
    assert cfg.control.stale_timeout_s == 0.25
    path = tmp_path / "trial.cfg"
    path.write_text("seed = 7\n")
    assert load_config(path).seed == 7


@pytest.mark.parametrize("text", ["bogus = 1", "tracker.bogus = 1", "other.x = 1", "duration_s = 0",
                                  "kind = nonsense", "tracker.roi_count = 2", "motion_compensation = maybe",
                                  "profile = 4"])
def test_config_errors(text):
    with pytest.raises(ValueError):
        parse_config_text(text)


# Reports

def test_report_round_trip_and_summary_consistency(tmp_path):
    rec = run_tracking_accuracy(track(duration_s=1.0))
    csv_path, json_path = write_report(rec, tmp_path / "r.csv")
    rows = read_report_rows(csv_path)
    doc = json.loads(json_path.read_text())
    trans = [float(r["translation_mm"]) for r in rows]
    rot = [float(r["rotation_deg"]) for r in rows]
    s = doc["summary"]
    assert s["count"] == len(rows) == 10
    assert abs(s["translation_mm_mean"] - statistics.fmean(trans)) < 1e-9
    assert abs(s["translation_mm_std"] - statistics.pstdev(trans)) < 1e-9
    assert abs(s["rotation_deg_mean"] - statistics.fmean(rot)) < 1e-9
    assert doc["seed"] == 0 and doc["config"]["duration_s"] == 1.0


def test_rerun_is_byte_identical(tmp_path):
    paths = [write_report(run_tracking_accuracy(track(profile=2, axis="y", duration_s=1.0, seed=5)),
                          tmp_path / f"run{i}.csv") for i in range(2)]
    assert paths[0][0].read_bytes() == paths[1][0].read_bytes()
    assert paths[0][1].read_bytes() == paths[1][1].read_bytes()


def test_empty_record_writes_nothing(tmp_path):
    for empty in (MetricsRecord(track(), ()), NccSeries(track(), True, (), (), ())):
        with pytest.raises(EmptyRecordError):
            write_report(empty, tmp_path / "empty.csv")
    assert not list(tmp_path.iterdir())


# Experiments

def test_noiseless_tracking_is_near_exact():
    s = run_tracking_accuracy(track(profile=1, axis="x", duration_s=3.0, **QUIET)).summary()
    assert s["translation_mm_mean"] < 0.05 and s["stale_count"] == 0


def test_static_scene_sits_at_noise_floor():
    quiet = run_tracking_accuracy(track(profile=0, duration_s=2.0, **QUIET)).summary()
    noisy = run_tracking_accuracy(track(profile=0, duration_s=2.0)).summary()
    moving = run_tracking_accuracy(track(profile=3, axis="x", duration_s=2.0)).summary()
    assert quiet["translation_mm_mean"] < 0.01
    # with no motion, the error comes from depth noise alone and is on par with the moving case
    assert 0.02 < noisy["translation_mm_mean"] < 0.3
    assert noisy["translation_mm_mean"] < 2 * moving["translation_mm_mean"]


def test_zero_lag_servo_on_static_tissue():
    cfg = servo(profile=0, duration_s=2.0, plant_tau_s=0.0, plant_latency_s=0.0, marker_noise_mm=0.0,
                marker_noise_deg=0.0, **QUIET)
    assert run_servo_accuracy(cfg).summary()["translation_mm_mean"] < 0.01


def test_free_form_servo_stays_bounded():
    s = run_servo_accuracy(servo(profile=1, axis="free", duration_s=4.0)).summary()
    assert s["translation_mm_mean"] < 3.0 and s["stale_count"] == 0


def test_command_log_rows():
    log = []
    rec = run_servo_accuracy(servo(profile=1, axis="x", duration_s=1.0), command_log=log)
    assert len(log) == len(rec.samples) == 26
    assert all(t == pytest.approx(s.t) for (t, *_), s in zip(log, rec.samples))


def test_servo_aborts_when_tissue_is_lost():
    curtain = Occluder(0.5, 99.0, ((0, 0), (720, 0), (720, 576), (0, 576)))
    with pytest.raises(ExperimentAborted):
        run_servo_accuracy(servo(profile=1, axis="x", duration_s=3.0, occluders=(curtain,)))


def test_ncc_static_tissue_and_no_motion_makes_mc_a_no_op():
    on, off = run_ncc_stability(ExperimentConfig(kind="ncc-stability", profile=0, duration_s=2.0, **QUIET))
    # only the 0.1 mm / 0.3 deg marker noise moves the probe
    assert on.scores[0] == 1.0 and min(on.scores) > 0.97
    np.testing.assert_allclose(on.scores, off.scores, atol=1e-6)
    assert on.motion_compensation and not off.motion_compensation
    noisy, _ = run_ncc_stability(ExperimentConfig(kind="ncc-stability", profile=0, duration_s=2.0))
    assert noisy.mean > 0.95


def test_tracking_pass_is_reproducible():
    cfg = track(profile=3, axis="z", duration_s=1.0, seed=2)
    a, b = run_tracking_pass(cfg), run_tracking_pass(cfg)
    assert [e.transform.as_row12() for e in a.estimates] == [e.transform.as_row12() for e in b.estimates]


def test_plan_occlusion_covers_exactly_the_chosen_rois():
    tp = run_tracking_pass(track(profile=0, duration_s=0.1))
    occ, ids = plan_occlusion(tp.initial_rois, 4, 0.0, 1.0)
    assert len(ids) == 4
    mask = polygon_mask(occ.polygon_at(0.5), 576, 720)
    for roi in tp.initial_rois:
        u, v, w, h = roi.rect
        covered = mask[v:v + h, u:u + w]
        assert covered.all() if roi.id in ids else not covered.any()


# CLI

def test_cli_exit_codes(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["track", "--profile", "1", "--axis", "x", "--duration", "0.5", "--out", str(out), "--table",
                 "--log"]) == EXIT_OK
    assert (out / "track_p1_x_s0.csv").exists() and (out / "track_p1_x_s0.json").exists()
    assert len((out / "track_p1_x_s0.jsonl").read_text().splitlines()) == 6
    assert "P1 x" in capsys.readouterr().out
    assert main(["track", "--axis", "w", "--out", str(out)]) == EXIT_CONFIG
    bad = tmp_path / "bad.cfg"
    bad.write_text("tracker.min_corner_score = 1e9\n")
    assert main(["track", "--config", str(bad), "--duration", "0.2", "--out", str(out)]) == EXIT_TRACKING
    blocker = tmp_path / "file"
    blocker.write_text("")
    assert main(["track", "--duration", "0.2", "--out", str(blocker / "sub")]) == EXIT_IO
    assert main(["track", "--config", str(tmp_path / "missing.cfg")]) == EXIT_IO


def test_cli_ncc_and_servo(tmp_path, capsys):
    out = tmp_path / "o"
    assert main(["ncc", "--profile", "3", "--axis", "y", "--duration", "1", "--out", str(out), "--table"]) == EXIT_OK
    assert (out / "ncc_p3_y_s0_mc_on.csv").exists() and (out / "ncc_p3_y_s0_mc_off.json").exists()
    assert main(["servo", "--profile", "2", "--axis", "z", "--duration", "1", "--out", str(out)]) == EXIT_OK
    assert len(read_report_rows(out / "servo_p2_z_s0.csv")) == 26
    assert "NCC on" in capsys.readouterr().out


def test_config_echo_roundtrips_through_json():
    cfg = dataclasses.replace(track(), occluders=(Occluder(0, 1, ((0, 0), (1, 0), (0, 1))),))
    echo = json.loads(json.dumps(cfg.echo(), sort_keys=True))
    assert echo["occluders"] == 1 and echo["tracker"]["roi_count"] == 12
