"""
The attacker loop: for every candidate value, time a transaction whose
faulting SUB compares the kernel byte against the candidate, then keep the
slowest candidate. Many passes are folded into a histogram of per-pass
argmax values and the mode is the decoded byte.

Two execution paths produce identical numbers:

* :func:`run_pass` simulates every timed region instruction by instruction.
* :func:`collect_passes` simulates each distinct (candidate, forwarded byte)
  case once without noise and adds the per-region RDTSC delays drawn for the
  whole block of passes. This is valid because a region measures exactly
  ``cycles + d_start + d_end``; ``tests/test_attack.py`` holds both paths
  to equality.
"""
from __future__ import annotations

import csv
import enum
import functools
import io
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .asm import assemble
from .core import NO_NOISE, MicroConfig, Simulator
from .gadgets import Gadget, GadgetKind, apply_gadget
from .isa import PAGE_SIZE, ArchState, MemorySpace, Privilege, Program
from .streams import ArrayDraws, philox_key, uniform_rows

SECRET_ADDR = 0xFFFF_8880_0004_2000

# uniforms consumed by one timed region, in execution order:
# start RDTSC (jitter, outlier), forwarded-load hit, end RDTSC (jitter, outlier)
DRAWS_PER_REGION = 5
_J1, _O1, _FWD, _J2, _O2 = range(DRAWS_PER_REGION)

START_REG, END_REG = "r15", "r14"


class DecodeRule(str, enum.Enum):
    ARGMAX_MODE = "argmax_mode"
    MEAN_MAX = "mean_max"


@dataclass(frozen=True)
class AttackConfig:
    to: int = 255
    passes: int = 2000
    offset_range: Optional[Tuple[int, ...]] = None  # None: every byte of the secret
    decode_rule: DecodeRule = DecodeRule.ARGMAX_MODE

    def __post_init__(self):
        object.__setattr__(self, "decode_rule", DecodeRule(self.decode_rule))
        if self.offset_range is not None:
            object.__setattr__(self, "offset_range", tuple(int(o) for o in self.offset_range))
        if not 1 <= self.to <= 255:
            raise ValueError("to must lie in [1, 255]")
        if self.passes < 1:
            raise ValueError("passes must be at least 1")

    def offsets(self, victim: "VictimSpec") -> Tuple[int, ...]:
        if self.offset_range is None:
            return tuple(range(len(victim.secret)))
        return self.offset_range


@dataclass(frozen=True)
class VictimSpec:
    secret: bytes
    keep_cached: bool = True
    uncached_readability: float = 0.1
    secret_addr: int = SECRET_ADDR

    def __post_init__(self):
        if isinstance(self.secret, str):
            object.__setattr__(self, "secret", self.secret.encode())
        if not self.secret:
            raise ValueError("secret must be non-empty")
        if not 0.0 <= self.uncached_readability <= 1.0:
            raise ValueError("uncached_readability must lie in [0, 1]")

    def with_byte(self, offset: int, value: int) -> "VictimSpec":
        data = bytearray(self.secret)
        data[offset] = value
        return replace(self, secret=bytes(data))


@dataclass(frozen=True, eq=False)
class PassRecord:
    """One sweep over the candidates; ``timings[t]`` is the cycles measured for candidate t."""

    timings: np.ndarray
    max_time: int
    argmax: int

    @classmethod
    def from_timings(cls, timings) -> "PassRecord":
        timings = np.asarray(timings, dtype=np.int64)
        # np.argmax keeps the first maximum, same as the strict "<" update in the attack loop
        best = int(np.argmax(timings))
        return cls(timings, int(timings[best]), best)

    def __eq__(self, other):
        if not isinstance(other, PassRecord):
            return NotImplemented
        return (np.array_equal(self.timings, other.timings) and self.max_time == other.max_time
                and self.argmax == other.argmax)


@dataclass(frozen=True, eq=False)
class PassBlock:
    """All passes for one byte, as arrays. Row p is pass p."""

    offset: int
    durations: np.ndarray  # (passes, to + 1)

    @property
    def argmax(self) -> np.ndarray:
        return np.argmax(self.durations, axis=1)

    @property
    def max_time(self) -> np.ndarray:
        return self.durations.max(axis=1)

    def record(self, index: int) -> PassRecord:
        return PassRecord.from_timings(self.durations[index])

    def records(self) -> List[PassRecord]:
        return [self.record(i) for i in range(len(self.durations))]

    def histogram(self) -> np.ndarray:
        return np.bincount(self.argmax, minlength=256)

    def decode(self, rule: DecodeRule) -> int:
        if DecodeRule(rule) is DecodeRule.MEAN_MAX:
            return int(np.argmax(self.durations.mean(axis=0)))
        return int(np.argmax(self.histogram()))


# ==================================================================================================
# Victim
# ==================================================================================================
def install_victim(victim: VictimSpec, state: Optional[ArchState] = None) -> ArchState:
    """Place the secret in kernel pages of a fresh (or given) user state's memory."""
    state = state or ArchState()
    start = victim.secret_addr
    pages = dict(state.mem.privilege)
    for page in range(start // PAGE_SIZE, (start + len(victim.secret) - 1) // PAGE_SIZE + 1):
        pages[page] = Privilege.KERNEL
    mem = MemorySpace.build(pages, {start: victim.secret})
    cells = dict(state.mem.cells)
    cells.update(mem.cells)
    return state.evolve(mem=MemorySpace(cells, pages, state.mem.readability))


def victim_step(victim: VictimSpec, memory: MemorySpace, micro: MicroConfig) -> MemorySpace:
    """One iteration of the co-runner's ``dummy += secret[i]`` loop."""
    if victim.keep_cached:
        return memory.with_readability(micro.secret_transiently_readable)
    return memory.with_readability(victim.uncached_readability)


def schedule(passes: int):
    """Deterministic co-run order: one victim step before each attacker pass."""
    for p in range(passes):
        yield ("victim", p)
        yield ("attacker", p)


# ==================================================================================================
# Attack program
# ==================================================================================================
ATTACK_TEMPLATE = """\
RDTSC {start}
MOV rcx, {addr:#x}
MOV rbx, {test_num}
XBEGIN fallback
SUB rbx, [rcx]          # the flag-writing instruction
XEND
fallback:
JZ equal
JMP notequal
equal: NOP
notequal: NOP
RDTSC {end}
HALT
"""


@functools.lru_cache(maxsize=4096)
def build_attack_program(test_num: int, offset: int, gadget: Optional[Gadget] = None,
                         secret_addr: int = SECRET_ADDR) -> Program:
    if not 0 <= test_num <= 255:
        raise ValueError("test_num must be a byte")
    if offset < 0:
        raise ValueError("offset must be non-negative")
    program = assemble(ATTACK_TEMPLATE.format(start=START_REG, end=END_REG,
                                              addr=secret_addr + offset, test_num=test_num))
    if gadget is not None and gadget.kind is not GadgetKind.HARDWARE_OFF:
        program = apply_gadget(program, gadget)
    return program


def _check_offset(victim: VictimSpec, offset: int) -> None:
    if not 0 <= offset < len(victim.secret):
        raise IndexError(f"offset {offset} outside the {len(victim.secret)}-byte secret")


def _region_width(attack: AttackConfig) -> int:
    return (attack.to + 1) * DRAWS_PER_REGION


def pass_uniforms(micro: MicroConfig, attack: AttackConfig, offset: int,
                  first: int, count: int) -> np.ndarray:
    """Uniforms for passes ``first .. first+count-1``: shape (count, to + 1, DRAWS_PER_REGION)."""
    rows = uniform_rows(philox_key(micro.rng_seed, offset), first, count, _region_width(attack))
    return rows.reshape(count, attack.to + 1, DRAWS_PER_REGION)


def _timed(result) -> int:
    regs = result.final_state.regs
    return regs[END_REG] - regs[START_REG]


def run_pass(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec, offset: int,
             pass_index: int = 0, gadget: Optional[Gadget] = None) -> PassRecord:
    """One pass, every region simulated instruction by instruction."""
    _check_offset(victim, offset)
    state = install_victim(victim)
    state = state.evolve(mem=victim_step(victim, state.mem, micro))
    uniforms = pass_uniforms(micro, attack, offset, pass_index, 1)[0]
    timings = []
    for test_num in range(attack.to + 1):
        draws = ArrayDraws(uniforms[test_num])
        result = Simulator(micro, draws).run(state, build_attack_program(test_num, offset, gadget,
                                                                         victim.secret_addr))
        if draws.used != DRAWS_PER_REGION:
            raise RuntimeError(f"timed region consumed {draws.used} draws")
        timings.append(_timed(result))
    return PassRecord.from_timings(timings)


def _timing_config(micro: MicroConfig) -> MicroConfig:
    return replace(micro, noise=NO_NOISE, rng_seed=0, secret_transiently_readable=1.0)


@functools.lru_cache(maxsize=4096)
def _probe_state(offset: int, secret_addr: int, forwarded: int) -> ArchState:
    return install_victim(VictimSpec(bytes(offset) + bytes([forwarded]), secret_addr=secret_addr))


@functools.lru_cache(maxsize=8192)
def _cycle_row(timing: MicroConfig, to: int, offset: int, gadget: Optional[Gadget],
               secret_addr: int, forwarded: int) -> np.ndarray:
    """Noise-free cycles of every candidate's region when the kernel load forwards ``forwarded``."""
    state = _probe_state(offset, secret_addr, forwarded)
    row = np.empty(to + 1, dtype=np.int64)
    for test_num in range(to + 1):
        program = build_attack_program(test_num, offset, gadget, secret_addr)
        draws = ArrayDraws([0.0] * DRAWS_PER_REGION)
        row[test_num] = _timed(Simulator(timing, draws, tracing=False).run(state, program))
    row.flags.writeable = False
    return row


def region_cycles(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec, offset: int,
                  gadget: Optional[Gadget] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-free cycles per candidate when the load forwards the secret / forwards 0."""
    timing = _timing_config(micro)
    key = (timing, attack.to, offset, gadget, victim.secret_addr)
    return _cycle_row(*key, victim.secret[offset]), _cycle_row(*key, 0)


def collect_passes(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec, offset: int,
                   gadget: Optional[Gadget] = None) -> PassBlock:
    _check_offset(victim, offset)
    if gadget is not None and gadget.kind is GadgetKind.HARDWARE_OFF:
        micro = replace(micro, jcc_stall_penalty=0)
    hit_cycles, miss_cycles = region_cycles(micro, attack, victim, offset, gadget)
    mem = install_victim(victim).mem
    readability = np.empty(attack.passes)
    for actor, p in schedule(attack.passes):
        if actor == "victim":
            mem = victim_step(victim, mem, micro)
        else:
            readability[p] = mem.readability
    u = pass_uniforms(micro, attack, offset, 0, attack.passes)
    hit = u[:, :, _FWD] < readability[:, None]
    noise = micro.noise
    durations = (np.where(hit, hit_cycles, miss_cycles)
                 + noise.delays(u[:, :, _J1], u[:, :, _O1])
                 + noise.delays(u[:, :, _J2], u[:, :, _O2]))
    return PassBlock(offset, durations)


def leak_byte(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec, offset: int,
              gadget: Optional[Gadget] = None) -> Tuple[int, np.ndarray]:
    """Decoded byte (per ``attack.decode_rule``) and the 256-bin argmax histogram."""
    block = collect_passes(micro, attack, victim, offset, gadget)
    return block.decode(attack.decode_rule), block.histogram()


# ==================================================================================================
# Reports
# ==================================================================================================
@dataclass(frozen=True, eq=False)
class LeakEntry:
    offset: int
    decoded: int
    truth: int
    histogram: np.ndarray
    passes: int
    argmax: np.ndarray = field(repr=False)
    max_time: np.ndarray = field(repr=False)


@dataclass(frozen=True, eq=False)
class LeakReport:
    entries: Tuple[LeakEntry, ...]
    success_rate: float
    micro: MicroConfig
    attack: AttackConfig
    victim: VictimSpec

    @property
    def decoded(self) -> bytes:
        return bytes(e.decoded for e in self.entries)

    def to_dict(self) -> Dict[str, object]:
        return {
            "success_rate": f"{self.success_rate:.6f}",
            "decoded_hex": self.decoded.hex(),
            "offsets": [
                {
                    "offset": e.offset,
                    "decoded": e.decoded,
                    "truth": e.truth,
                    "correct": e.decoded == e.truth,
                    "passes": e.passes,
                    "histogram": [int(c) for c in e.histogram],
                }
                for e in self.entries
            ],
            "config": {
                "micro": self.micro.to_mapping(),
                "attack": attack_mapping(self.attack),
                "victim": victim_mapping(self.victim),
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def passes_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("offset", "pass", "argmax", "max_time"))
        for e in self.entries:
            for p, (a, m) in enumerate(zip(e.argmax.tolist(), e.max_time.tolist())):
                writer.writerow((e.offset, p, a, m))
        return buf.getvalue()


def attack_mapping(attack: AttackConfig) -> Dict[str, object]:
    offsets = "all" if attack.offset_range is None else ",".join(map(str, attack.offset_range))
    return {"to": attack.to, "passes": attack.passes, "offset_range": offsets,
            "decode_rule": attack.decode_rule.value}


def victim_mapping(victim: VictimSpec) -> Dict[str, object]:
    return {"secret_hex": victim.secret.hex(), "keep_cached": victim.keep_cached,
            "uncached_readability": victim.uncached_readability,
            "secret_addr": hex(victim.secret_addr)}


def leak_string(micro: MicroConfig, attack: AttackConfig, victim: VictimSpec,
                gadget: Optional[Gadget] = None) -> LeakReport:
    entries = []
    for offset in attack.offsets(victim):
        block = collect_passes(micro, attack, victim, offset, gadget)
        entries.append(LeakEntry(offset, block.decode(attack.decode_rule), victim.secret[offset],
                                 block.histogram(), attack.passes, block.argmax, block.max_time))
    hits = sum(e.decoded == e.truth for e in entries)
    rate = hits / len(entries) if entries else 1.0
    return LeakReport(tuple(entries), rate, micro, attack, victim)
