"""Statistics over collected passes: argmax histograms, mean profiles,
decoder accuracy across independent experiments, and parameter sweeps."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .attack import (
    AttackConfig,
    DecodeRule,
    PassBlock,
    PassRecord,
    VictimSpec,
    build_attack_program,
    collect_passes,
    install_victim,
    victim_step,
)
from .core import NO_NOISE, MicroConfig, Simulator
from .gadgets import Gadget, GadgetKind
from .isa import Opcode
from .streams import ArrayDraws, derive_seed

BINS = 256

Records = Union[PassBlock, Sequence[PassRecord]]


class AnalysisError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Histogram:
    bins: np.ndarray
    total: int

    def __post_init__(self):
        if len(self.bins) != BINS or int(self.bins.sum()) != self.total:
            raise AnalysisError("histogram bins must be 256 counts summing to total")

    @property
    def mode(self) -> int:
        return int(np.argmax(self.bins))

    def __eq__(self, other):
        if not isinstance(other, Histogram):
            return NotImplemented
        return self.total == other.total and np.array_equal(self.bins, other.bins)


@dataclass(frozen=True, eq=False)
class MeanProfile:
    mean: np.ndarray
    std: np.ndarray  # sample deviation; 0 where only one pass exists
    samples: int

    @property
    def peak(self) -> int:
        return int(np.argmax(self.mean))


@dataclass(frozen=True)
class SweepResult:
    param: str
    grid: Tuple[float, ...]
    metric: Tuple[float, ...]
    metric_name: str = "metric"

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(self.grid))
        object.__setattr__(self, "metric", tuple(self.metric))
        if not self.grid:
            raise AnalysisError("sweep grid is empty")
        if len(self.grid) != len(self.metric):
            raise AnalysisError("one metric value per grid point")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise AnalysisError("sweep grid must be strictly increasing")


def _timings(records: Records) -> np.ndarray:
    if isinstance(records, PassBlock):
        durations = records.durations
    else:
        records = list(records)
        if not records:
            raise AnalysisError("no pass records")
        durations = np.stack([r.timings for r in records])
    if len(durations) == 0:
        raise AnalysisError("no pass records")
    return durations


def argmax_histogram(records: Records) -> Histogram:
    if isinstance(records, PassBlock):
        argmax = records.argmax
    else:
        argmax = np.array([r.argmax for r in records], dtype=np.int64)
    if len(argmax) == 0:
        raise AnalysisError("no pass records")
    return Histogram(np.bincount(argmax, minlength=BINS), len(argmax))


def mean_profile(records: Records) -> MeanProfile:
    durations = _timings(records).astype(np.float64)
    n = len(durations)
    std = durations.std(axis=0, ddof=1) if n > 1 else np.zeros(durations.shape[1])
    return MeanProfile(durations.mean(axis=0), std, n)


# --------------------------------------------------------------------------------------------------
# Experiments
# --------------------------------------------------------------------------------------------------
def experiment_secret(seed: int, experiment: int) -> int:
    """Uniform secret byte for one experiment, independent of its noise stream."""
    return derive_seed(seed, experiment, 1) % 256


def experiment_outcomes(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec,
                        rule: DecodeRule, experiments: int, *, random_secret: bool = False,
                        gadget: Optional[Gadget] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Decoded and true bytes for each experiment.

    Experiment ``e`` re-seeds the noise with ``derive_seed(micro.rng_seed, e)``,
    so two calls with the same base seed are paired experiment by experiment.
    Only the first requested offset is attacked.
    """
    if experiments < 1:
        raise AnalysisError("experiments must be at least 1")
    offset = attack.offsets(victim)[0]
    decoded = np.empty(experiments, dtype=np.int64)
    truth = np.empty(experiments, dtype=np.int64)
    for e in range(experiments):
        run_micro = replace(micro, rng_seed=derive_seed(micro.rng_seed, e))
        target = victim
        if random_secret:
            target = victim.with_byte(offset, experiment_secret(micro.rng_seed, e))
        block = collect_passes(run_micro, attack, target, offset, gadget)
        decoded[e] = block.decode(rule)
        truth[e] = target.secret[offset]
    return decoded, truth


def decoder_accuracy(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec,
                     rule: DecodeRule, experiments: int, *, random_secret: bool = False,
                     gadget: Optional[Gadget] = None) -> float:
    decoded, truth = experiment_outcomes(micro, attack, victim, rule, experiments,
                                         random_secret=random_secret, gadget=gadget)
    return float(np.mean(decoded == truth))


# --------------------------------------------------------------------------------------------------
# Zero-noise signal
# --------------------------------------------------------------------------------------------------
_PROBE_BYTE = 0x41


def _guarded_jz_cost(micro: MicroConfig, test_num: int, secret: int, gadget: Optional[Gadget]) -> int:
    victim = VictimSpec(bytes([secret]))
    state = install_victim(victim)
    state = state.evolve(mem=victim_step(victim, state.mem, micro))
    result = Simulator(micro, ArrayDraws([0.0] * 5)).run(state, build_attack_program(test_num, 0, gadget))
    costs = [e.cycle_cost for e in result.trace if e.opcode == Opcode.JZ.value and not e.transient]
    return costs[0]


def jz_signal(micro: MicroConfig, gadget: Optional[Gadget] = None) -> int:
    """Extra cycles the attack's JZ pays when the candidate matches, at zero noise."""
    if gadget is not None and gadget.kind is GadgetKind.HARDWARE_OFF:
        micro = replace(micro, jcc_stall_penalty=0)
    quiet = replace(micro, noise=NO_NOISE, secret_transiently_readable=1.0)
    stalled = _guarded_jz_cost(quiet, _PROBE_BYTE, _PROBE_BYTE, gadget)
    plain = _guarded_jz_cost(quiet, _PROBE_BYTE ^ 1, _PROBE_BYTE, gadget)
    return stalled - plain


def stall_window_sweep(micro: MicroConfig, delays: Iterable[int]) -> SweepResult:
    """Signal per NOP count between the squash and the JZ (0 means no gadget)."""
    grid = [int(d) for d in delays]
    if any(d < 0 for d in grid):
        raise AnalysisError("delays must be non-negative")
    signal = [jz_signal(micro, Gadget(GadgetKind.DELAY, d) if d else None) for d in grid]
    return SweepResult("delay", grid, signal, "signal")


def delay_cutoff(micro: MicroConfig, limit: int = 64) -> int:
    """Smallest NOP count that silences the channel."""
    for d in range(limit + 1):
        if jz_signal(micro, Gadget(GadgetKind.DELAY, d) if d else None) == 0:
            return d
    raise AnalysisError(f"no delay up to {limit} silences the channel")


# --------------------------------------------------------------------------------------------------
# Generic sweeps (CLI)
# --------------------------------------------------------------------------------------------------
SWEEP_PARAMS = ("delay", "revert_stall_window", "jitter", "passes")


def sweep(param: str, grid: Sequence[int], micro: MicroConfig, attack: AttackConfig,
          victim: VictimSpec, experiments: int = 20, gadget: Optional[Gadget] = None) -> SweepResult:
    """delay -> JZ signal; revert_stall_window -> smallest silencing delay;
    jitter / passes -> argmax_mode accuracy over random-secret experiments."""
    grid = [int(g) for g in grid]
    if not grid:
        raise AnalysisError("empty sweep grid")
    if param == "delay":
        return stall_window_sweep(micro, grid)
    if param == "revert_stall_window":
        cutoffs = [delay_cutoff(replace(micro, revert_stall_window=w)) for w in grid]
        return SweepResult(param, grid, cutoffs, "cutoff_delay")
    if param == "jitter":
        metric = [decoder_accuracy(replace(micro, noise=replace(micro.noise, per_sample_jitter=j)),
                                   attack, victim, DecodeRule.ARGMAX_MODE, experiments,
                                   random_secret=True, gadget=gadget)
                  for j in grid]
        return SweepResult(param, grid, metric, "accuracy")
    if param == "passes":
        metric = [decoder_accuracy(micro, replace(attack, passes=p), victim, DecodeRule.ARGMAX_MODE,
                                   experiments, random_secret=True, gadget=gadget)
                  for p in grid]
        return SweepResult(param, grid, metric, "accuracy")
    raise AnalysisError(f"unknown sweep parameter {param!r}; expected one of {', '.join(SWEEP_PARAMS)}")


# --------------------------------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------------------------------
def _fmt(value) -> str:
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return f"{float(value):.6f}"


def _table(header, rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue()


def histogram_csv(hist: Histogram) -> str:
    return _table(("test_num", "count"), ((v, int(c)) for v, c in enumerate(hist.bins)))


def mean_profile_csv(profile: MeanProfile) -> str:
    return _table(("test_num", "mean", "stddev"),
                  ((v, _fmt(m), _fmt(s)) for v, (m, s) in enumerate(zip(profile.mean, profile.std))))


def sweep_csv(result: SweepResult) -> str:
    return _table((result.param, result.metric_name),
                  ((_fmt(g), _fmt(m)) for g, m in zip(result.grid, result.metric)))


def timings_csv(blocks: Sequence[PassBlock]) -> str:
    """Full per-candidate durations, one row per (offset, pass)."""
    width = blocks[0].durations.shape[1] if blocks else 0
    header = ("offset", "pass") + tuple(f"t{v}" for v in range(width))
    rows = ((b.offset, p, *row) for b in blocks for p, row in enumerate(b.durations.tolist()))
    return _table(header, rows)


def histograms_from_passes_csv(text: str) -> Dict[int, Histogram]:
    """Rebuild per-offset argmax histograms from a stored passes CSV."""
    argmax: Dict[int, List[int]] = defaultdict(list)
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or not {"offset", "argmax"} <= set(reader.fieldnames):
        raise AnalysisError("passes CSV needs offset and argmax columns")
    for row in reader:
        argmax[int(row["offset"])].append(int(row["argmax"]))
    if not argmax:
        raise AnalysisError("passes CSV holds no rows")
    return {o: Histogram(np.bincount(v, minlength=BINS), len(v)) for o, v in sorted(argmax.items())}


def blocks_from_timings_csv(text: str) -> Dict[int, PassBlock]:
    rows: Dict[int, List[List[int]]] = defaultdict(list)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or header[:2] != ["offset", "pass"]:
        raise AnalysisError("timings CSV needs offset and pass columns first")
    for row in reader:
        rows[int(row[0])].append([int(x) for x in row[2:]])
    if not rows:
        raise AnalysisError("timings CSV holds no rows")
    return {o: PassBlock(o, np.array(v, dtype=np.int64)) for o, v in sorted(rows.items())}
