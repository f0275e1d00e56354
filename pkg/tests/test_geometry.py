import numpy as np
import pytest

from steerbeam.geometry import (MultichannelBuffer, ScenePose, apply_steering,
                                build_steering_plan, choose_reference, compute_tdoa,
                                delay_and_sum, design_fractional_filter, fir_block,
                                make_target, perturb_tdoa)

FS = 16000.0


def far_field_pose(aperture=0.1, dist=10.0, mics=4, fs=FS):
    rng = np.random.default_rng(11)
    center = np.zeros(3)
    mic_pos = center + rng.uniform(-aperture / 2, aperture / 2, size=(mics, 3))
    src = np.array([dist, 0.3, -0.2])
    return ScenePose(src, mic_pos, fs)


class TestComputeTdoa:
    def test_hand_example(self):
        pose = ScenePose([10, 0, 0], [[0, 0, 0], [0.5, 0, 0]], FS)
        tdoa = compute_tdoa(pose)
        assert tdoa.shape == (1,)
        assert tdoa[0] == pytest.approx(16000 * (10 - 9.5) / 343, abs=1e-9)

    def test_equidistant_mics(self):
        pose = ScenePose([0, 0, 0], [[1, 0, 0], [0, 1, 0], [0, 0, 1]], FS)
        assert np.allclose(compute_tdoa(pose), 0.0)

    def test_reference_choice_makes_tdoas_nonnegative(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            mics = rng.uniform(-0.2, 0.2, size=(5, 3))
            src = rng.uniform(-5, 5, size=3)
            pose = ScenePose(src, mics, FS)
            perm = choose_reference(pose)
            permuted = ScenePose(src, mics[perm], FS)
            assert np.all(compute_tdoa(permuted) >= 0)

    def test_rejects_single_channel(self):
        with pytest.raises(ValueError):
            compute_tdoa(ScenePose([1, 0, 0], [[0, 0, 0]], FS))

    def test_rejects_coincident_source(self):
        pose = ScenePose([0, 0, 0], [[0, 0, 0], [1, 0, 0]], FS)
        with pytest.raises(ValueError):
            compute_tdoa(pose)


class TestChooseReference:
    def test_farthest_first(self):
        pose = ScenePose([0, 0, 0], [[2, 0, 0], [5, 0, 0], [3, 0, 0]], FS)
        assert choose_reference(pose).tolist() == [1, 0, 2]

    def test_single_mic_identity(self):
        pose = ScenePose([1, 1, 1], [[0, 0, 0]], FS)
        assert choose_reference(pose).tolist() == [0]

    def test_tie_goes_to_lowest_index(self):
        pose = ScenePose([0, 0, 0], [[0, 0, 3], [3, 0, 0], [0, 3, 0]], FS)
        dists = pose.mic_distances()
        brute = min(range(3), key=lambda i: (-dists[i], i))
        assert choose_reference(pose)[0] == brute == 0

    def test_relative_order_preserved(self):
        pose = ScenePose([0, 0, 0], [[1, 0, 0], [4, 0, 0], [2, 0, 0], [3, 0, 0]], FS)
        assert choose_reference(pose).tolist() == [1, 0, 2, 3]


class TestFractionalFilter:
    def test_zero_fraction_is_impulse(self):
        taps = design_fractional_filter(0.0, 17)
        expected = np.zeros(17)
        expected[8] = 1.0
        assert np.allclose(taps, expected, atol=1e-15)

    def test_half_sample_delay_on_sine(self):
        # 500 Hz sinusoid should come out delayed by exactly 8.5 samples
        taps = design_fractional_filter(0.5, 17)
        t = np.arange(4000)
        x = np.sin(2 * np.pi * 500 * t / FS)
        y = fir_block(taps, x, np.zeros(16))
        want = np.sin(2 * np.pi * 500 * (t - 8.5) / FS)
        assert np.max(np.abs(y[100:] - want[100:])) < 1e-3

    @pytest.mark.parametrize("frac", [0.1, 0.25, 0.5, 0.77, 0.9])
    def test_group_delay_at_1khz(self, frac):
        taps = design_fractional_filter(frac, 17)
        nfft = 1 << 16
        spectrum = np.fft.rfft(taps, nfft)
        freqs = np.fft.rfftfreq(nfft, 1 / FS)
        phase = np.unwrap(np.angle(spectrum))
        gd = -np.gradient(phase, 2 * np.pi * (freqs[1] - freqs[0])) * FS
        i1k = np.argmin(np.abs(freqs - 1000.0))
        assert abs(gd[i1k] - (8 + frac)) < 0.02

    @pytest.mark.parametrize("frac", list(np.linspace(0, 0.95, 8)))
    def test_magnitude_flat_below_08_nyquist(self, frac):
        taps = design_fractional_filter(frac, 17)
        spectrum = np.fft.rfft(taps, 1 << 14)
        freqs = np.fft.rfftfreq(1 << 14, 1 / FS)
        mag_db = 20 * np.log10(np.abs(spectrum[freqs <= 0.8 * FS / 2]))
        assert np.max(np.abs(mag_db)) < 0.5

    def test_unit_dc_gain(self):
        for frac in np.linspace(0, 0.99, 23):
            assert design_fractional_filter(frac, 17).sum() == pytest.approx(1.0, abs=1e-12)

    def test_rejects_bad_args(self):
        with pytest.raises(ValueError):
            design_fractional_filter(0.5, 16)
        with pytest.raises(ValueError):
            design_fractional_filter(1.0, 17)
        with pytest.raises(ValueError):
            design_fractional_filter(-0.1, 17)


class TestSteeringPlan:
    def test_floor_fraction_split(self):
        plan = build_steering_plan(np.array([23.32]), 17)
        assert plan.int_delays.tolist() == [23]
        assert plan.frac_delays[0] == pytest.approx(0.32)
        assert plan.ref_comp_delay == 8

    def test_zero_tdoas_degenerate(self):
        plan = build_steering_plan(np.array([0.0, 0.0]), 17)
        assert np.all(plan.int_delays == 0)
        for row in plan.frac_taps:
            assert np.argmax(row) == 8 and row[8] == pytest.approx(1.0)

    def test_integer_tdoa(self):
        plan = build_steering_plan(np.array([7.0]), 17)
        assert plan.int_delays[0] == 7 and plan.frac_delays[0] == 0.0

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            build_steering_plan(np.array([-0.5]), 17)


class TestApplySteering:
    def test_reference_pure_delay(self):
        plan = build_steering_plan(np.array([4.0]), 17)
        x = np.zeros((2, 64))
        x[0, 0] = 1.0
        out = apply_steering(plan, MultichannelBuffer(x, FS))
        assert out.samples[0, plan.ref_comp_delay] == 1.0
        assert np.sum(out.samples[0] != 0) == 1

    def test_identical_channels_zero_tdoa(self):
        rng = np.random.default_rng(0)
        x = np.tile(rng.standard_normal(256), (3, 1))
        plan = build_steering_plan(np.zeros(2), 17)
        out = apply_steering(plan, MultichannelBuffer(x, FS))
        for c in range(1, 3):
            assert np.max(np.abs(out.samples[c] - out.samples[0])) < 1e-3

    def test_output_length_and_causality(self):
        rng = np.random.default_rng(1)
        plan = build_steering_plan(np.array([5.7]), 17)
        x = rng.standard_normal((2, 300))
        out_a = apply_steering(plan, MultichannelBuffer(x, FS))
        y = x.copy()
        y[:, 150:] += rng.standard_normal((2, 150))
        out_b = apply_steering(plan, MultichannelBuffer(y, FS))
        assert out_a.samples.shape == x.shape
        assert np.array_equal(out_a.samples[:, :150], out_b.samples[:, :150])

    def test_linearity(self):
        rng = np.random.default_rng(2)
        plan = build_steering_plan(np.array([3.4, 9.1]), 17)
        x = rng.standard_normal((3, 200))
        y = rng.standard_normal((3, 200))
        a, b = 1.7, -0.6
        lhs = apply_steering(plan, MultichannelBuffer(a * x + b * y, FS)).samples
        rhs = a * apply_steering(plan, MultichannelBuffer(x, FS)).samples \
            + b * apply_steering(plan, MultichannelBuffer(y, FS)).samples
        assert np.max(np.abs(lhs - rhs)) < 1e-6 * max(1.0, np.max(np.abs(rhs)))

    def test_channel_count_mismatch(self):
        plan = build_steering_plan(np.array([3.0]), 17)
        with pytest.raises(ValueError):
            apply_steering(plan, MultichannelBuffer(np.zeros((3, 10)), FS))


class TestDelayAndSum:
    def test_single_channel_identity(self):
        x = np.random.default_rng(0).standard_normal((1, 100))
        assert np.array_equal(delay_and_sum(MultichannelBuffer(x, FS)), x[0])

    def test_identical_channels(self):
        row = np.random.default_rng(1).standard_normal(100)
        buf = MultichannelBuffer(np.tile(row, (4, 1)), FS)
        assert np.allclose(delay_and_sum(buf), row)

    def test_array_gain_4_mics(self):
        # aligned identical speech + independent white noise: 10 log10(4) dB gain
        rng = np.random.default_rng(3)
        n = 4 * 16000
        speech = simulate_speechlike(rng, n)
        noise = rng.standard_normal((4, n)) * 0.3
        mixed = speech[None, :] + noise
        out = delay_and_sum(MultichannelBuffer(mixed, FS))
        snr_in = 10 * np.log10(np.sum(speech**2) / np.sum(noise[0] ** 2))
        out_noise = out - speech
        snr_out = 10 * np.log10(np.sum(speech**2) / np.sum(out_noise**2))
        assert snr_out - snr_in == pytest.approx(10 * np.log10(4), abs=0.5)


def simulate_speechlike(rng, n):
    x = rng.standard_normal(n)
    kernel = np.exp(-np.arange(40) / 8.0)
    return np.convolve(x, kernel / kernel.sum(), mode="same")


class TestMakeTarget:
    def test_noise_free_equals_ds_of_mix(self):
        rng = np.random.default_rng(4)
        clean = MultichannelBuffer(rng.standard_normal((2, 300)), FS)
        plan = build_steering_plan(np.array([6.3]), 17)
        tgt = make_target(plan, clean)
        mix_path = delay_and_sum(apply_steering(plan, clean))
        assert np.array_equal(tgt, mix_path)

    def test_linearity(self):
        rng = np.random.default_rng(5)
        plan = build_steering_plan(np.array([2.2, 11.6]), 17)
        x = rng.standard_normal((3, 200))
        y = rng.standard_normal((3, 200))
        lhs = make_target(plan, MultichannelBuffer(2.0 * x + 0.5 * y, FS))
        rhs = 2.0 * make_target(plan, MultichannelBuffer(x, FS)) \
            + 0.5 * make_target(plan, MultichannelBuffer(y, FS))
        assert np.max(np.abs(lhs - rhs)) < 1e-6 * max(1.0, np.max(np.abs(rhs)))

    def test_impulse_pair_hand_convolved(self):
        # tdoa 5.0: channel 0 impulse lands at D, channel 1 impulse at 5 + D
        plan = build_steering_plan(np.array([5.0]), 17)
        x = np.zeros((2, 64))
        x[:, 0] = 1.0
        tgt = make_target(plan, MultichannelBuffer(x, FS))
        expected = np.zeros(64)
        expected[8] += 0.5
        expected[13] += 0.5
        assert np.allclose(tgt, expected, atol=1e-12)

    def test_mix_decomposition_consistency(self):
        # steering-then-summing the mix equals sum of steered-summed parts
        rng = np.random.default_rng(6)
        plan = build_steering_plan(np.array([4.4]), 17)
        x = rng.standard_normal((2, 256))
        v = rng.standard_normal((2, 256))
        whole = delay_and_sum(apply_steering(plan, MultichannelBuffer(x + v, FS)))
        parts = make_target(plan, MultichannelBuffer(x, FS)) \
            + make_target(plan, MultichannelBuffer(v, FS))
        assert np.max(np.abs(whole - parts)) < 1e-9


class TestPerturbTdoa:
    def test_zero_angle_exact(self):
        pose = far_field_pose()
        perm = choose_reference(pose)
        pose = ScenePose(pose.source_pos, pose.mic_pos[perm], FS)
        assert np.array_equal(perturb_tdoa(pose, 0.0, 1), compute_tdoa(pose))

    def test_deterministic(self):
        pose = far_field_pose()
        perm = choose_reference(pose)
        pose = ScenePose(pose.source_pos, pose.mic_pos[perm], FS)
        a = perturb_tdoa(pose, 5.0, 123)
        b = perturb_tdoa(pose, 5.0, 123)
        assert np.array_equal(a, b)

    def test_geometric_bound_monte_carlo(self):
        # |dtau| <= aperture * f * sin(10 deg) / s for a 10 cm far-field array
        pose = far_field_pose(aperture=0.1, dist=10.0)
        perm = choose_reference(pose)
        pose = ScenePose(pose.source_pos, pose.mic_pos[perm], FS)
        base = compute_tdoa(pose)
        aperture = max(np.linalg.norm(pose.mic_pos[i] - pose.mic_pos[j])
                       for i in range(4) for j in range(4))
        bound = aperture * FS * np.sin(np.deg2rad(10.0)) / 343.0
        worst = 0.0
        for seed in range(1000):
            delta = perturb_tdoa(pose, 5.0, seed) - base
            worst = max(worst, np.max(np.abs(delta)))
        assert worst <= bound

    def test_clamped_nonnegative(self):
        pose = far_field_pose()
        perm = choose_reference(pose)
        pose = ScenePose(pose.source_pos, pose.mic_pos[perm], FS)
        for seed in range(200):
            assert np.all(perturb_tdoa(pose, 5.0, seed) >= 0)
