"""
Cycle-counting executor with TSX-style transactions, fault-triggered
transient windows, architectural rollback and the flag-revert stall.

Timing model in one paragraph: every retired instruction costs its base
latency. A kernel access inside a transaction costs its own latency, then a
fixed ``transient_window`` cycles during which up to ``transient_window``
shadow instructions run (plus ``handler_abort_latency`` when suppression goes
through a signal handler). If any shadow instruction left ZF different from
the checkpoint, a pending revert on ZF is installed until
``squash + revert_stall_window``; a JZ/JE issued before then pays
``jcc_stall_penalty`` extra. Any architectural flag write clears the pending
revert. RDTSC reads the counter mid-way through its own jittered latency, so
a bracketed region measures ``true + d1 + d2`` with one noise delay per read.
"""
from __future__ import annotations

import csv
import enum
import io
import math
from dataclasses import dataclass, field, fields, replace
from types import MappingProxyType
from typing import Dict, List, Mapping, NamedTuple, Optional

import numpy as np

from .isa import (
    FLAG_DEPENDENT_JUMPS,
    FLAG_WRITERS,
    JUMP_READS,
    JUMPS,
    ArchState,
    Instruction,
    IsaError,
    Opcode,
    PrivilegedAccess,
    Privilege,
    Program,
    step,
)
from .streams import GeneratorDraws

DEFAULT_SEED = 0x5EED
DEFAULT_BUDGET = 10 ** 6

DEFAULT_LATENCY = MappingProxyType({
    "jump": 1,
    "alu": 1,
    "load": 4,
    "nop": 1,
    "flag_image": 2,
    "rdtsc": 0,
    "tsx": 1,
})

_LATENCY_CLASS = {
    Opcode.JZ: "jump", Opcode.JE: "jump", Opcode.JMP: "jump",
    Opcode.SUB: "alu", Opcode.CMP: "alu", Opcode.CMPXCHG: "alu", Opcode.MOV: "alu",
    Opcode.NOP: "nop",
    Opcode.LAHF: "flag_image", Opcode.SAHF: "flag_image",
    Opcode.PUSHF: "flag_image", Opcode.POPF: "flag_image",
    Opcode.RDTSC: "rdtsc",
    Opcode.XBEGIN: "tsx", Opcode.XEND: "tsx",
}


class SimulationError(Exception):
    pass


class UntransactedFault(SimulationError):
    """A kernel access outside a transaction: a real #PF would kill the process."""


class Runaway(SimulationError):
    pass


class ConfigError(ValueError):
    pass


# ==================================================================================================
# Configuration
# ==================================================================================================
class NoiseKind(str, enum.Enum):
    NONE = "none"
    ADDITIVE = "additive"


class Suppression(str, enum.Enum):
    TSX = "tsx"
    HANDLER = "handler"


@dataclass(frozen=True)
class NoiseModel:
    kind: NoiseKind = NoiseKind.ADDITIVE
    per_sample_jitter: int = 4
    outlier_prob: float = 0.01
    outlier_magnitude: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "kind", NoiseKind(self.kind))
        if self.per_sample_jitter < 0 or self.outlier_magnitude < 0:
            raise ConfigError("noise magnitudes must be non-negative")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ConfigError("outlier_prob must lie in [0, 1]")

    def delay(self, u_jitter: float, u_outlier: float) -> int:
        """Delay contributed by one RDTSC read, from its two uniforms."""
        if self.kind is NoiseKind.NONE:
            return 0
        d = int(u_jitter * (self.per_sample_jitter + 1))
        if u_outlier < self.outlier_prob:
            d += self.outlier_magnitude
        return d

    def delays(self, u_jitter: np.ndarray, u_outlier: np.ndarray) -> np.ndarray:
        """Vectorised :meth:`delay`."""
        if self.kind is NoiseKind.NONE:
            return np.zeros(np.shape(u_jitter), dtype=np.int64)
        d = (u_jitter * (self.per_sample_jitter + 1)).astype(np.int64)
        return d + np.where(u_outlier < self.outlier_prob, self.outlier_magnitude, 0)


NO_NOISE = NoiseModel(kind=NoiseKind.NONE)


@dataclass(frozen=True)
class MicroConfig:
    transient_window: int = 8
    revert_stall_window: int = 8
    jcc_stall_penalty: int = 20
    base_latency: Mapping[str, int] = DEFAULT_LATENCY
    secret_transiently_readable: float = 1.0
    noise: NoiseModel = NoiseModel()
    rng_seed: int = DEFAULT_SEED
    suppression: Suppression = Suppression.TSX
    handler_abort_latency: int = 150

    def __post_init__(self):
        latency = dict(DEFAULT_LATENCY)
        for key, value in dict(self.base_latency).items():
            if key not in DEFAULT_LATENCY:
                raise ConfigError(f"unknown latency class {key!r}")
            if value < 0:
                raise ConfigError(f"latency {key} must be non-negative")
            latency[key] = int(value)
        object.__setattr__(self, "base_latency", MappingProxyType(latency))
        object.__setattr__(self, "_latency", latency)
        object.__setattr__(self, "_latency_key", tuple(latency.values()))
        object.__setattr__(self, "suppression", Suppression(self.suppression))
        if self.transient_window < 0 or self.revert_stall_window < 0 or self.jcc_stall_penalty < 0:
            raise ConfigError("window and penalty values must be non-negative")
        if self.handler_abort_latency < 0:
            raise ConfigError("handler_abort_latency must be non-negative")
        if not 0.0 <= self.secret_transiently_readable <= 1.0:
            raise ConfigError("secret_transiently_readable must lie in [0, 1]")
        if not 0 <= self.rng_seed < 2 ** 64:
            raise ConfigError("rng_seed must be a 64-bit unsigned integer")
        object.__setattr__(self, "_key", tuple(self.to_mapping().items()))

    def __hash__(self):
        return hash(self._key)

    def __eq__(self, other):
        if not isinstance(other, MicroConfig):
            return NotImplemented
        return self._key == other._key

    def latency(self, instr: Instruction) -> int:
        op = instr.opcode
        cls = _LATENCY_CLASS.get(op)
        if cls is None:  # LABEL, HALT
            return 0
        lat = self._latency
        if op is Opcode.MOV:
            return lat["load"] if instr.reads_memory else lat["alu"]
        if cls == "alu" and instr.reads_memory:
            return lat["alu"] + lat["load"]
        return lat[cls]

    def program_latencies(self, program: Program) -> tuple:
        """Per-slot base latency of ``program``, memoised on the program object."""
        cache = program.__dict__.setdefault("_latency_cache", {})
        lat = cache.get(self._latency_key)
        if lat is None:
            lat = cache[self._latency_key] = tuple(self.latency(i) for i in program)
        return lat

    @property
    def abort_overhead(self) -> int:
        extra = self.handler_abort_latency if self.suppression is Suppression.HANDLER else 0
        return self.transient_window + extra

    def to_mapping(self) -> Dict[str, object]:
        """Flat key/value view, stable order, as written to config files."""
        out: Dict[str, object] = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "noise":
                for nf in fields(NoiseModel):
                    v = getattr(value, nf.name)
                    out[f"noise.{nf.name}"] = v.value if isinstance(v, enum.Enum) else v
            elif f.name == "base_latency":
                for key in DEFAULT_LATENCY:
                    out[f"base_latency.{key}"] = value[key]
            else:
                out[f.name] = value.value if isinstance(value, enum.Enum) else value
        return out

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "MicroConfig":
        """Build from flat string values; unknown keys are errors."""
        kwargs: Dict[str, object] = {}
        noise: Dict[str, object] = {}
        latency: Dict[str, int] = {}
        types = {f.name: f.type for f in fields(cls)}
        noise_types = {f.name: f.type for f in fields(NoiseModel)}
        for key, raw in values.items():
            try:
                if key.startswith("noise."):
                    name = key[len("noise."):]
                    if name not in noise_types:
                        raise ConfigError(f"unknown config key {key!r}")
                    noise[name] = _coerce(noise_types[name], raw)
                elif key.startswith("base_latency."):
                    name = key[len("base_latency."):]
                    if name not in DEFAULT_LATENCY:
                        raise ConfigError(f"unknown config key {key!r}")
                    latency[name] = int(raw, 0)
                elif key in types and key not in ("noise", "base_latency"):
                    kwargs[key] = _coerce(types[key], raw)
                else:
                    raise ConfigError(f"unknown config key {key!r}")
            except ValueError as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"bad value for {key}: {raw!r}") from None
        if noise:
            kwargs["noise"] = NoiseModel(**noise)
        if latency:
            kwargs["base_latency"] = latency
        return cls(**kwargs)


def _coerce(type_name, raw):
    type_name = str(type_name)
    raw = str(raw).strip()
    if "float" in type_name:
        value = float(raw)
        if not math.isfinite(value):
            raise ValueError(raw)
        return value
    if "int" in type_name:
        return int(raw, 0)
    return raw


def hardware_mitigated(config: MicroConfig) -> MicroConfig:
    """The hardware fix: a Jcc no longer pays anything for a pending revert."""
    return replace(config, jcc_stall_penalty=0)


# ==================================================================================================
# Pipeline state and results
# ==================================================================================================
@dataclass
class PipelineState:
    cycle: int = 0
    pending_revert: Dict[str, int] = field(default_factory=dict)  # flag -> expires_at
    in_transaction: bool = False
    checkpoint: Optional[ArchState] = None
    fallback_pc: Optional[int] = None

    def expire(self) -> None:
        for flag in [f for f, until in self.pending_revert.items() if self.cycle >= until]:
            del self.pending_revert[flag]


class TraceEntry(NamedTuple):
    step: int
    pc: int
    opcode: str
    cycle_cost: int
    transient: bool = False
    stalled: bool = False
    noise: int = 0


@dataclass(frozen=True)
class TransientOutcome:
    forwarded: Optional[int]
    flags_changed: frozenset
    executed: tuple  # (pc, opcode) of each shadow instruction after the faulting one


@dataclass(frozen=True)
class RunResult:
    final_state: ArchState
    cycles: int
    trace: tuple
    aborted: bool

    def costs(self, opcode: str) -> List[int]:
        return [e.cycle_cost for e in self.trace if e.opcode == opcode and not e.transient]


TRACE_COLUMNS = ("step", "pc", "opcode", "cycle_cost", "transient", "stalled")


def trace_csv(result: RunResult) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    for e in result.trace:
        writer.writerow((e.step, e.pc, e.opcode, e.cycle_cost, int(e.transient), int(e.stalled)))
    return buf.getvalue()


# ==================================================================================================
# Simulator
# ==================================================================================================
def jcc_cost(config: MicroConfig, pipeline: PipelineState, opcode: Opcode) -> int:
    base = config.base_latency["jump"]
    if opcode not in JUMPS:
        raise ValueError(f"{opcode} is not a jump")
    pipeline.expire()
    if opcode in FLAG_DEPENDENT_JUMPS and JUMP_READS[opcode] in pipeline.pending_revert:
        return base + config.jcc_stall_penalty
    return base


def rdtsc(pipeline: PipelineState, noise: NoiseModel = NO_NOISE, draws=None) -> int:
    """Read the virtual TSC. Always consumes two uniforms when a draw source is given."""
    d = 0
    if draws is not None:
        d = noise.delay(draws.next(), draws.next())
    value = pipeline.cycle + d
    pipeline.cycle += 2 * d
    return value


_HALT = Opcode.HALT
_KERNEL = Privilege.KERNEL
_ZF_CHANGED = frozenset(("zf",))
_NONE_CHANGED = frozenset()
_RDTSC = Opcode.RDTSC
_XBEGIN = Opcode.XBEGIN
_XEND = Opcode.XEND


class Simulator:
    """Single-threaded executor. One instance per run; no shared state."""

    def __init__(self, config: MicroConfig, draws=None, tracing: bool = True):
        self.config = config
        self.draws = draws if draws is not None else GeneratorDraws(config.rng_seed)
        self.pipeline = PipelineState()
        self.tracing = tracing

    def _readability(self, state: ArchState) -> float:
        if state.mem.readability is not None:
            return state.mem.readability
        return self.config.secret_transiently_readable

    def transient_execute(self, state: ArchState, program: Program, fault_pc: int) -> TransientOutcome:
        """Run the shadow window starting at the faulting instruction.

        Nothing here reaches architectural state; the caller restores the
        checkpoint regardless of what the shadow did.
        """
        return self._shadow(dict(state.regs), state.flags, state.stack, state.mem, program, fault_pc,
                            self._readability(state))

    def _shadow(self, regs, flags, stack, mem, program, fault_pc, readability):
        # ``regs`` is scratch and gets clobbered
        pipe = self.pipeline
        reference = (pipe.checkpoint.flags if pipe.checkpoint is not None else flags).zf
        hit = self.draws.next() < readability
        forwarded = []

        def forward(address: int) -> int:
            if mem.page_privilege(address) is _KERNEL:
                byte = mem.peek(address) if hit else 0
                forwarded.append(byte)
                return byte
            return mem.read(address)

        instructions, labels = program.instructions, program.labels
        n = len(instructions)
        window = self.config.transient_window
        cycle = pipe.cycle
        changed = False
        executed = []
        try:
            flags, pc, stack, mem = step(regs, flags, fault_pc, stack, mem, instructions[fault_pc],
                                         labels, n, cycle, forward)
            changed = flags.zf != reference
            while len(executed) < window and pc < n:
                instr = instructions[pc]
                if instr.opcode is _HALT:
                    break
                executed.append((pc, instr.mnemonic))
                flags, pc, stack, mem = step(regs, flags, pc, stack, mem, instr, labels, n, cycle)
                if flags.zf != reference:
                    changed = True
        except IsaError:
            pass  # a shadow fault ends the window early
        return TransientOutcome(forwarded[0] if forwarded else None,
                                _ZF_CHANGED if changed else _NONE_CHANGED, tuple(executed))

    def run(self, state: ArchState, program: Program, budget: int = DEFAULT_BUDGET) -> RunResult:
        cfg = self.config
        pipe = self.pipeline
        latencies = cfg.program_latencies(program)
        jump_base = cfg.base_latency["jump"]
        tracing = self.tracing
        trace: List[TraceEntry] = []
        log = trace.append
        aborted = False
        instructions = program.instructions
        labels, n = program.labels, len(instructions)
        regs = dict(state.regs)
        flags, pc, stack, mem = state.flags, state.pc, state.stack, state.mem
        steps = 0

        while pc < n:
            steps += 1
            if steps > budget:
                raise Runaway(f"instruction budget {budget} exceeded")
            instr = instructions[pc]
            op = instr.opcode

            if op is _HALT:
                if tracing:
                    log(TraceEntry(len(trace), pc, instr.mnemonic, 0))
                pc = n
                break

            if op is _RDTSC:
                before = pipe.cycle
                value = rdtsc(pipe, cfg.noise, self.draws)
                cost = latencies[pc]
                flags, next_pc, stack, mem = step(regs, flags, pc, stack, mem, instr, labels, n, value)
                pipe.cycle += cost
                if tracing:
                    log(TraceEntry(len(trace), pc, instr.mnemonic, cost, False, False,
                                   pipe.cycle - before - cost))
                pc = next_pc
                continue

            stalled = False
            if op in JUMPS:
                cost = jump_base
                pending = pipe.pending_revert
                if pending:
                    pipe.expire()
                    if op in FLAG_DEPENDENT_JUMPS and JUMP_READS[op] in pending:
                        cost += cfg.jcc_stall_penalty
                stalled = cost > jump_base
            else:
                cost = latencies[pc]

            if op is _XBEGIN and not pipe.in_transaction:
                # flat nesting: an inner XBEGIN joins the outer transaction
                pipe.in_transaction = True
                pipe.checkpoint = ArchState.trusted(dict(regs), flags, pc, stack, mem)
                pipe.fallback_pc = labels[instr.label]

            try:
                flags_after, next_pc, stack, mem = step(regs, flags, pc, stack, mem, instr, labels, n,
                                                        pipe.cycle)
            except PrivilegedAccess:
                if not pipe.in_transaction:
                    raise UntransactedFault(f"kernel access outside a transaction at pc {pc}") from None
                pipe.cycle += cost
                readability = mem.readability
                if readability is None:
                    readability = cfg.secret_transiently_readable
                outcome = self._shadow(dict(regs), flags, stack, mem, program, pc, readability)
                overhead = cfg.abort_overhead
                pipe.cycle += overhead
                if tracing:
                    log(TraceEntry(len(trace), pc, instr.mnemonic, cost, True))
                    for shadow_pc, name in outcome.executed:
                        log(TraceEntry(len(trace), shadow_pc, name, 0, True))
                    log(TraceEntry(len(trace), pc, "ABORT", overhead))
                pipe.pending_revert = {flag: pipe.cycle + cfg.revert_stall_window
                                       for flag in outcome.flags_changed}
                cp = pipe.checkpoint
                regs = dict(cp.regs)
                flags, stack, mem = cp.flags, cp.stack, cp.mem
                pc = pipe.fallback_pc
                pipe.in_transaction = False
                pipe.checkpoint = pipe.fallback_pc = None
                aborted = True
                continue

            if op is _XEND and pipe.in_transaction:
                pipe.in_transaction = False
                pipe.checkpoint = pipe.fallback_pc = None
            if op in FLAG_WRITERS:
                pipe.pending_revert.clear()

            pipe.cycle += cost
            if tracing:
                log(TraceEntry(len(trace), pc, instr.mnemonic, cost, False, stalled))
            flags, pc = flags_after, next_pc

        final = ArchState.trusted(regs, flags, pc, stack, mem)
        return RunResult(final, pipe.cycle, tuple(trace), aborted)


def run(config: MicroConfig, state: ArchState, program: Program, draws=None,
        budget: int = DEFAULT_BUDGET) -> RunResult:
    return Simulator(config, draws).run(state, program, budget)


def transient_execute(config: MicroConfig, state: ArchState, program: Program, fault_pc: int,
                      checkpoint: Optional[ArchState] = None, draws=None) -> TransientOutcome:
    """Stand-alone shadow window, as :meth:`Simulator.run` invokes it on a fault."""
    sim = Simulator(config, draws)
    sim.pipeline.checkpoint = checkpoint if checkpoint is not None else state
    sim.pipeline.in_transaction = True
    return sim.transient_execute(state, program, fault_pc)
