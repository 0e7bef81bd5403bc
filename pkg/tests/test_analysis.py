from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagtime.analysis import (
    AnalysisError,
    Histogram,
    SweepResult,
    argmax_histogram,
    blocks_from_timings_csv,
    decoder_accuracy,
    delay_cutoff,
    experiment_outcomes,
    histogram_csv,
    histograms_from_passes_csv,
    jz_signal,
    mean_profile,
    mean_profile_csv,
    stall_window_sweep,
    sweep,
    sweep_csv,
    timings_csv,
)
from flagtime.attack import AttackConfig, DecodeRule, PassBlock, PassRecord, VictimSpec, collect_passes
from flagtime.core import NO_NOISE, MicroConfig

QUIET = MicroConfig(noise=NO_NOISE)


def test_zero_noise_histogram():
    block = collect_passes(QUIET, AttackConfig(passes=100), VictimSpec(b"\x41"), 0)
    hist = argmax_histogram(block)
    assert hist.bins[0x41] == 100 and hist.total == 100
    assert hist.bins.sum() == 100 and np.count_nonzero(hist.bins) == 1
    assert argmax_histogram(block.records()) == hist


def test_single_pass_histogram():
    assert argmax_histogram([PassRecord.from_timings([1, 2, 3])]).total == 1


def test_noisy_histogram_mode():
    block = collect_passes(MicroConfig(), AttackConfig(passes=2000), VictimSpec(b"\x41"), 0)
    assert argmax_histogram(block).mode == 0x41


@given(st.lists(st.lists(st.integers(0, 10 ** 6), min_size=256, max_size=256), min_size=1, max_size=20))
def test_histogram_conservation(rows):
    hist = argmax_histogram([PassRecord.from_timings(r) for r in rows])
    assert hist.bins.sum() == hist.total == len(rows)


def test_empty_inputs_rejected():
    with pytest.raises(AnalysisError):
        argmax_histogram([])
    with pytest.raises(AnalysisError):
        mean_profile([])
    with pytest.raises(AnalysisError):
        Histogram(np.zeros(256, dtype=int), 3)


def test_mean_profile_zero_noise_gap():
    block = collect_passes(QUIET, AttackConfig(passes=5), VictimSpec(b"\x41"), 0)
    profile = mean_profile(block)
    assert profile.peak == 0x41
    assert profile.mean[0x41] - np.delete(profile.mean, 0x41).max() == QUIET.jcc_stall_penalty
    assert not profile.std.any()


def test_mean_profile_identical_records():
    rec = PassRecord.from_timings(np.arange(256))
    profile = mean_profile([rec] * 7)
    assert not profile.std.any() and profile.samples == 7
    assert np.isfinite(profile.mean).all()


def test_mean_profile_single_record():
    assert not mean_profile([PassRecord.from_timings([4, 5])]).std.any()


def test_decoder_accuracy_zero_noise():
    assert decoder_accuracy(QUIET, AttackConfig(passes=1), VictimSpec(b"\x10"),
                            DecodeRule.ARGMAX_MODE, 5, random_secret=True) == 1.0


def test_decoder_accuracy_rejects_zero_experiments():
    with pytest.raises(AnalysisError):
        decoder_accuracy(QUIET, AttackConfig(passes=1), VictimSpec(b"a"), DecodeRule.ARGMAX_MODE, 0)


def test_paired_experiments_share_secrets():
    args = (MicroConfig(), AttackConfig(passes=4), VictimSpec(b"a"))
    _, t1 = experiment_outcomes(*args, DecodeRule.ARGMAX_MODE, 30, random_secret=True)
    _, t2 = experiment_outcomes(*args, DecodeRule.MEAN_MAX, 30, random_secret=True)
    assert np.array_equal(t1, t2) and len(set(t1.tolist())) > 10


def test_mean_decoder_strictly_worse_under_noise():
    args = (MicroConfig(), AttackConfig(passes=2000), VictimSpec(b"a"))
    argmax = decoder_accuracy(*args, DecodeRule.ARGMAX_MODE, 20, random_secret=True)
    mean = decoder_accuracy(*args, DecodeRule.MEAN_MAX, 20, random_secret=True)
    assert argmax == 1.0 and mean < argmax


def test_unreadable_secret_decodes_zero_at_chance():
    micro = replace(MicroConfig(), secret_transiently_readable=0.0)
    decoded, truth = experiment_outcomes(micro, AttackConfig(passes=2000), VictimSpec(b"a"),
                                         DecodeRule.ARGMAX_MODE, 20, random_secret=True)
    assert (decoded == 0).all()
    assert np.mean(decoded == truth) == np.mean(truth == 0)


def test_stall_window_sweep_examples():
    result = stall_window_sweep(MicroConfig(), [0, 7, 8, 10])
    assert result.metric == (20, 20, 0, 0)
    assert result.param == "delay"


@pytest.mark.parametrize("window", [6, 7, 8, 9])
def test_delay_cutoff_equals_window(window):
    assert delay_cutoff(replace(MicroConfig(), revert_stall_window=window)) == window


@given(st.integers(0, 12), st.integers(1, 40), st.integers(0, 20))
def test_sweep_is_a_step_function(window, penalty, delay):
    micro = replace(QUIET, revert_stall_window=window, jcc_stall_penalty=penalty)
    signal = stall_window_sweep(micro, [delay]).metric[0]
    assert signal == (penalty if delay < window else 0)


def test_sweep_rejects_bad_grids():
    with pytest.raises(AnalysisError):
        stall_window_sweep(QUIET, [-1])
    with pytest.raises(AnalysisError):
        SweepResult("delay", (1, 1), (0, 0))
    with pytest.raises(AnalysisError):
        sweep("delay", [], QUIET, AttackConfig(), VictimSpec(b"a"))
    with pytest.raises(AnalysisError):
        sweep("colour", [1], QUIET, AttackConfig(), VictimSpec(b"a"))


def test_passes_sweep_runs():
    result = sweep("passes", [1, 50], MicroConfig(), AttackConfig(), VictimSpec(b"a"), experiments=4)
    assert result.metric_name == "accuracy" and all(0 <= m <= 1 for m in result.metric)


def test_window_sweep_reports_cutoffs():
    result = sweep("revert_stall_window", [5, 9], MicroConfig(), AttackConfig(), VictimSpec(b"a"))
    assert result.metric == (5, 9)


def test_jitter_sweep_zero_jitter_perfect():
    micro = replace(MicroConfig(), noise=replace(MicroConfig().noise, outlier_prob=0.0))
    result = sweep("jitter", [0], micro, AttackConfig(passes=1), VictimSpec(b"a"), experiments=5)
    assert result.metric == (1.0,)


def test_csv_formats():
    block = collect_passes(QUIET, AttackConfig(passes=3), VictimSpec(b"\x02"), 0)
    lines = histogram_csv(argmax_histogram(block)).splitlines()
    assert lines[0] == "test_num,count" and lines[3] == "2,3" and len(lines) == 257
    means = mean_profile_csv(mean_profile(block)).splitlines()
    assert means[0] == "test_num,mean,stddev" and means[3].endswith(".000000,0.000000")
    assert sweep_csv(SweepResult("delay", (0, 8), (20, 0), "signal")) == "delay,signal\n0,20\n8,0\n"


def test_csv_round_trips():
    block = collect_passes(MicroConfig(), AttackConfig(passes=30), VictimSpec(b"\x02"), 0)
    again = blocks_from_timings_csv(timings_csv([block]))[0]
    assert np.array_equal(again.durations, block.durations)
    passes = "offset,pass,argmax,max_time\n" + "".join(
        f"0,{p},{a},0\n" for p, a in enumerate(block.argmax.tolist()))
    assert histograms_from_passes_csv(passes)[0] == argmax_histogram(block)
    with pytest.raises(AnalysisError):
        histograms_from_passes_csv("a,b\n")


def test_jz_signal_with_gadgets():
    from flagtime.gadgets import Gadget
    assert jz_signal(MicroConfig()) == 20
    for name in ("lahf_sahf", "pushf_popf", "hardware_off", "delay:8"):
        assert jz_signal(MicroConfig(), Gadget.parse(name)) == 0
    assert jz_signal(MicroConfig(), Gadget.parse("delay:4")) == 20
