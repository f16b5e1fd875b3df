import numpy as np
import pytest

from corpus import generate_corpus, make_episode, motion_tags_oracle, NS
from pocketloop.geometry import Pose
from pocketloop.kinematics import TAG_NO_SOLUTION, two_link_planar
from pocketloop.trajvalidate import (
    Episode,
    Frame,
    StructuralError,
    TAG_ACC_SPIKE,
    TAG_SLAM_LOW_FEATURES,
    TAG_VEL_JUMP,
    ValidatorConfig,
    apply_report,
    gripper_quantum,
    quantize_gripper,
    retime_episode,
    validate_episode,
)

CFG = ValidatorConfig()


def line_positions(n, speed=0.1, rate=30.0):
    return [np.array([speed * i / rate, 0.0, 0.0]) for i in range(n)]


class TestValidateEpisode:
    def test_clean_constant_velocity(self):
        ep = make_episode(line_positions(90), [200] * 90)
        report = validate_episode(ep, CFG)
        assert report.invalid_count == 0
        assert report.verdict == "accept"
        assert all(t == () for t in report.frame_tags)

    def test_single_position_jump(self):
        # stationary track with a 0.1 m step between frames 39 and 40:
        # backward differences give 3 m/s at frame 40 and 90 m/s^2 at 40, 41
        positions = [np.zeros(3) for _ in range(90)]
        for i in range(40, 90):
            positions[i] = positions[i] + np.array([0.1, 0.0, 0.0])
        jump_v = 0.1 * 30.0
        jump_a = jump_v * 30.0
        assert jump_v == pytest.approx(3.0) and jump_a == pytest.approx(90.0)
        ep = make_episode(positions, [200] * 90)
        report = validate_episode(ep, CFG)
        assert set(report.frame_tags[40]) == {TAG_VEL_JUMP, TAG_ACC_SPIKE}
        assert set(report.frame_tags[41]) == {TAG_ACC_SPIKE}
        expected = motion_tags_oracle(positions, 30.0, CFG.max_velocity, CFG.max_acceleration)
        assert [set(t) for t in report.frame_tags] == expected

    def test_low_feature_run(self):
        counts = [200] * 60
        for i in range(5, 10):
            counts[i] = 10
        ep = make_episode(line_positions(60), counts)
        report = validate_episode(ep, CFG)
        flagged = [i for i, t in enumerate(report.frame_tags) if TAG_SLAM_LOW_FEATURES in t]
        assert flagged == [5, 6, 7, 8, 9]

    def test_verdict_threshold(self):
        # 5 tagged frames of 100 is exactly 5%: accepted; 6 is rejected
        counts_ok = [200] * 100
        for i in range(5):
            counts_ok[i] = 0
        ep = make_episode(line_positions(100), counts_ok)
        assert validate_episode(ep, CFG).verdict == "accept"
        counts_bad = list(counts_ok)
        counts_bad[10] = 0
        ep2 = make_episode(line_positions(100), counts_bad)
        assert validate_episode(ep2, CFG).verdict == "reject"

    def test_corpus_exactness(self):
        for ep, expected in generate_corpus(40, seed=99, cfg=CFG):
            report = validate_episode(ep, CFG)
            assert [set(t) for t in report.frame_tags] == expected

    def test_idempotent(self):
        ep, _ = generate_corpus(1, seed=5, cfg=CFG)[0]
        assert validate_episode(ep, CFG) == validate_episode(ep, CFG)

    def test_poseless_frames_skip_motion_checks(self):
        # simulator episodes carry no pose; huge obs deltas must not tag
        t0 = 1_700_000_000 * NS
        frames = [
            Frame(t_ns=t0 + i * 33_333_333, feature_count=200, obs=np.full(4, i * 10.0))
            for i in range(30)
        ]
        ep = Episode("sim", "sort", "sim0", 30.0, t0, "rollout", 0, frames)
        report = validate_episode(ep, CFG)
        assert report.invalid_count == 0

    def test_kinematic_tags_from_chain(self):
        cfg = ValidatorConfig(chain=two_link_planar())
        positions = [np.array([2.6, 0.0, 0.0])] * 20
        ep = make_episode(positions, [200] * 20)
        report = validate_episode(ep, cfg)
        assert all(TAG_NO_SOLUTION in t for t in report.frame_tags)
        assert report.verdict == "reject"

    def test_non_monotone_timestamps_structural(self):
        ep = make_episode(line_positions(10), [200] * 10)
        ep.frames[4].t_ns = ep.frames[3].t_ns
        with pytest.raises(StructuralError):
            validate_episode(ep, CFG)

    def test_spacing_deviation_structural(self):
        ep = make_episode(line_positions(10), [200] * 10)
        ep.frames[5].t_ns += 20_000_000  # 60% of a 30 Hz period
        with pytest.raises(StructuralError):
            validate_episode(ep, CFG)

    def test_apply_report_consistency(self):
        ep, _ = generate_corpus(1, seed=12, cfg=CFG)[0]
        report = validate_episode(ep, CFG)
        apply_report(ep, report)
        for f in ep.frames:
            assert f.valid == (len(f.tags) == 0)


class TestEpisodeStructure:
    def test_bad_kind_rejected(self):
        with pytest.raises(StructuralError):
            Episode("x", "t", "d", 30.0, 0, "replay", 0, [Frame(t_ns=0)])

    def test_empty_frames_rejected(self):
        with pytest.raises(StructuralError):
            Episode("x", "t", "d", 30.0, 0, "demo", 0, [])


class TestRetime:
    def test_three_seconds_to_nine(self):
        ep = make_episode(line_positions(90), [200] * 90, rate_hz=30.0)
        out = retime_episode(ep, 3)
        assert len(out.frames) == 90
        assert out.rate_hz == pytest.approx(10.0)
        span_in = ep.frames[-1].t_ns - ep.frames[0].t_ns
        span_out = out.frames[-1].t_ns - out.frames[0].t_ns
        assert span_out == 3 * span_in
        assert span_in == pytest.approx(3.0 * NS, abs=NS // 10)

    def test_factor_one_identity(self):
        ep = make_episode(line_positions(30), [200] * 30)
        out = retime_episode(ep, 1)
        assert [f.t_ns for f in out.frames] == [f.t_ns for f in ep.frames]
        assert out.rate_hz == ep.rate_hz

    def test_invertible_in_integer_ns(self):
        ep = make_episode(line_positions(50), [200] * 50)
        out = retime_episode(ep, 3)
        recovered = [ep.t0_ns + (f.t_ns - ep.t0_ns) // 3 for f in out.frames]
        assert recovered == [f.t_ns for f in ep.frames]

    def test_retimed_clean_episode_stays_clean(self):
        # accelerations shrink by factor^2, velocities by factor
        ep = make_episode(line_positions(90, speed=1.2), [200] * 90)
        out = retime_episode(ep, 3)
        report = validate_episode(out, CFG)
        assert report.invalid_count == 0
        assert TAG_ACC_SPIKE not in {t for tags in report.frame_tags for t in tags}

    def test_velocity_indices_scaled(self):
        ep = make_episode(line_positions(30), [200] * 30)
        for f in ep.frames:
            f.action = np.array([0.05, 0.05, 1.0])
        out = retime_episode(ep, 3, velocity_indices=(0, 1))
        np.testing.assert_allclose(out.frames[0].action, [0.05 / 3, 0.05 / 3, 1.0])

    def test_factor_below_one_rejected(self):
        ep = make_episode(line_positions(10), [200] * 10)
        with pytest.raises(ValueError):
            retime_episode(ep, 0)


class TestQuantizeGripper:
    def test_quantum_and_example_value(self):
        dw = gripper_quantum(0.088, 60.0, 0.085)
        assert dw == pytest.approx(0.085 * 0.088 / 60.0, rel=1e-12)
        assert dw == pytest.approx(1.2466667e-4, rel=1e-6)
        # nearest multiple of dw to 0.0400 m is the 321st: 0.040018 m
        k = round(0.0400 / dw)
        assert k == 321
        (q,) = quantize_gripper([0.0400])
        assert q == pytest.approx(k * dw, rel=1e-12)
        assert q == pytest.approx(0.040018, abs=5e-7)

    def test_multiples_are_fixed_points(self):
        dw = gripper_quantum(0.088, 60.0, 0.085)
        widths = [k * dw for k in (0, 1, 17, 320, 681)]
        assert quantize_gripper(widths) == pytest.approx(widths, rel=1e-12)

    def test_error_bounded_by_half_quantum(self):
        rng = np.random.default_rng(3)
        dw = gripper_quantum(0.088, 60.0, 0.085)
        widths = rng.uniform(0.0, 0.085, size=500)
        out = quantize_gripper(list(widths))
        assert np.max(np.abs(np.array(out) - widths)) <= dw / 2 + 1e-15

    def test_out_of_range_rejected(self):
        with pytest.raises(ValueError):
            quantize_gripper([0.09])
        with pytest.raises(ValueError):
            quantize_gripper([-0.001])
