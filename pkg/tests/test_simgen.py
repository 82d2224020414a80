import numpy as np
import pytest

from haloscope import dsp, simgen
from haloscope.halo import HaloParams, bin_weights
from haloscope.score import find_signal_bin


def test_default_schedule_endpoints():
    s = simgen.default_schedule("standard")
    assert len(s) == 38
    assert s.entries[0].frequency == 1100.0 and s.entries[0].amplitude == 50.0
    assert s.entries[-1].frequency == 4.9e6
    assert s.total_duration == 38.0
    freqs = [e.frequency for e in s]
    assert freqs == sorted(freqs) and all(f == int(f) for f in freqs)


def test_weak_schedule_amplitudes():
    assert {e.amplitude for e in simgen.default_schedule("weak")} == {10.0}


def test_schedule_validation():
    with pytest.raises(ValueError):
        simgen.InjectionSchedule(((100.0, -1.0, 1.0),))
    with pytest.raises(ValueError):
        simgen.InjectionSchedule(((100.0, 1.0, 0.0),))
    with pytest.raises(ValueError):
        simgen.default_schedule("loud")
    sched = simgen.InjectionSchedule(((600.0, 10.0, 1.0),))
    with pytest.raises(ValueError, match="Nyquist"):
        simgen.synth_pair(sched, simgen.NoiseModel(), 1, sample_rate=1000)


def _tone_schedule(freq, amp=50.0, seconds=2):
    return simgen.InjectionSchedule(((freq, amp, float(seconds)),))


def test_noiseless_unity_gain_channels_agree():
    noise = simgen.NoiseModel(white_sigma=0.0, gain=simgen.UnityGain())
    sched = simgen.InjectionSchedule(((1200.0, 50.0, 1.0), (3300.0, 20.0, 1.0)))
    inj, sq = simgen.synth_pair(sched, noise, 2, sample_rate=20_000)
    assert len(inj) == len(sq) == 40_000
    np.testing.assert_array_equal(inj.samples, sq.samples)
    assert inj.samples.max() == 80  # 25 mV peak / 0.3125


def test_same_seed_bit_identical_and_seed_matters():
    sched = _tone_schedule(1000.0)
    a = simgen.synth_pair(sched, simgen.NoiseModel(seed=9, pink_amplitude=1.0), 2, sample_rate=10_000)
    b = simgen.synth_pair(sched, simgen.NoiseModel(seed=9, pink_amplitude=1.0), 2, sample_rate=10_000)
    c = simgen.synth_pair(sched, simgen.NoiseModel(seed=10, pink_amplitude=1.0), 2, sample_rate=10_000)
    assert np.array_equal(a[1].samples, b[1].samples)
    assert not np.array_equal(a[1].samples, c[1].samples)


def test_worker_count_does_not_change_output():
    noise = simgen.NoiseModel(seed=3, pink_amplitude=2.0, lines=((700.0, 4.0),))
    one = simgen.synth_science(noise, 5, sample_rate=5_000, workers=1)
    two = simgen.synth_science(noise, 5, sample_rate=5_000, workers=2)
    assert np.array_equal(one.samples, two.samples)


def test_blocks_can_be_generated_out_of_order():
    noise = simgen.NoiseModel(seed=4, pink_amplitude=1.0)
    full = simgen.synth_science(noise, 4, sample_rate=3_000).samples
    third = next(simgen.iter_science_blocks(noise, 4, 3_000, first_block=2))
    np.testing.assert_array_equal(third.squid, full[6_000:9_000])


def test_tone_peak_found_by_scorer():
    sched = _tone_schedule(10_000.0, seconds=1)
    inj, sq = simgen.synth_pair(sched, simgen.NoiseModel(seed=1), 1, sample_rate=1_000_000)
    assert find_signal_bin(dsp.periodogram(sq)) == 10_000.0


def test_spectral_placement_of_every_tone():
    rate = 200_000
    sched = simgen.default_schedule(f_stop=90_000.0, n_tones=12)
    inj, _ = simgen.synth_pair(sched, simgen.NoiseModel(seed=2), 12, sample_rate=rate)
    for i, step in enumerate(sched):
        p = dsp.periodogram(inj.samples[i * rate : (i + 1) * rate], rate)
        assert abs(np.argmax(p.values) * p.df - step.frequency) <= p.df


def test_science_zero_mean():
    noise = simgen.NoiseModel(white_sigma=5.0, seed=11)
    x = simgen.synth_science(noise, 4, sample_rate=50_000).millivolts()
    assert abs(x.mean()) < 3 * 5.0 / np.sqrt(x.size)


def test_science_length_arithmetic():
    x = simgen.synth_science(simgen.NoiseModel(white_sigma=0.0), 10, sample_rate=10_000_000)
    assert len(x) == 10**8


def test_rejects_short_schedule_and_bad_plant():
    with pytest.raises(ValueError, match="schedule covers"):
        simgen.synth_pair(_tone_schedule(100.0, seconds=1), simgen.NoiseModel(), 2, sample_rate=1000)
    with pytest.raises(ValueError, match="Nyquist"):
        simgen.synth_science(simgen.NoiseModel(), 1, simgen.PlantedSignal(500.0, 1.0), sample_rate=1000)
    with pytest.raises(ValueError):
        simgen.NoiseModel(lines=((600.0, 1.0),)).check_rate(1000)
    with pytest.raises(ValueError):
        simgen.NoiseModel(white_sigma=-1)


def test_expected_psd_matches_monte_carlo():
    rate, n = 8_192, 1_024
    noise = simgen.NoiseModel(white_sigma=2.0, pink_amplitude=3.0, lines=((1_000.0, 6.0),), seed=5, pink_rows=8)
    x = simgen.synth_science(noise, 64, sample_rate=rate).millivolts()
    segs = x.reshape(-1, n)
    measured = dsp.periodograms(segs, rate).mean(axis=0)
    expected = noise.expected_psd(rate, n).values
    k = np.arange(1, n // 2)
    rel_se = 1 / np.sqrt(segs.shape[0])
    # averages of 512 segments: bins agree at the few-sigma level
    assert np.mean(np.abs(measured[k] / expected[k] - 1)) < 2 * rel_se
    line_bin = int(1_000.0 / (rate / n))
    assert measured[line_bin] == pytest.approx(expected[line_bin], rel=0.05)


def test_expected_psd_white_level():
    p = simgen.NoiseModel(white_sigma=5.0).expected_psd(1e7, 10**8, 10, 20, quantized=False)
    np.testing.assert_allclose(p.values, 2 * 25.0 / 1e7)


def test_bandpass_gain_shape():
    g = simgen.BandpassGain()
    assert g(1e3) == pytest.approx(0.5 ** 0.5, rel=1e-3)
    assert g(1e5) == pytest.approx(1.0, abs=1e-3)
    assert g(10.0) < 0.011


def test_lineshape_plant_spectrum():
    rate, seconds = 1_000_000, 10
    plant = simgen.PlantedSignal.from_power(400_000.0, 0.04, lineshape=True)
    comps = plant.components(seed=3)
    n = rate * seconds
    x = simgen._planted_block(comps, simgen.UnityGain(), 0, n, rate)
    p = dsp.periodogram(x, rate)
    start, w = bin_weights(400_000.0, 0.1, 0.0, HaloParams())
    expected = 0.04 * w / 0.1
    got = p.values[start : start + len(w)]
    big = expected > 1e-3 * expected.max()
    np.testing.assert_allclose(got[big], expected[big], rtol=2e-3)
    assert np.mean(x**2) == pytest.approx(0.04, rel=1e-3)


def test_pure_tone_plant_power():
    plant = simgen.PlantedSignal(1_000.0, 4.0)
    assert plant.power == 2.0
    x = simgen._planted_block(plant.components(0), simgen.UnityGain(), 0, 10_000, 10_000)
    assert np.mean(x**2) == pytest.approx(2.0, rel=1e-9)
