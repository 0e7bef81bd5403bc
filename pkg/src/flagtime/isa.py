"""
Minimal x86-flavoured instruction set: registers, EFLAGS, privilege-tagged
byte memory and the architectural (non-speculative) executor.

Everything here is value-semantic. ``execute_architectural`` never mutates
its input state; the transient machinery lives in :mod:`flagtime.core`.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Optional, Sequence, Tuple, Union

MASK64 = (1 << 64) - 1
PAGE_SIZE = 4096

REGISTERS = (
    "rax", "rbx", "rcx", "rdx", "rsi", "rdi", "rbp",
    "r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15",
)


# ==================================================================================================
# Errors
# ==================================================================================================
class IsaError(Exception):
    pass


class UnmappedAddress(IsaError):
    def __init__(self, address: int):
        super().__init__(f"unmapped address {address:#x}")
        self.address = address


class PrivilegedAccess(IsaError):
    """User-mode access to a kernel page. The transient core catches this."""

    def __init__(self, address: int):
        super().__init__(f"privileged address {address:#x}")
        self.address = address


class UnknownLabel(IsaError):
    pass


class StackUnderflow(IsaError):
    pass


class InvalidOperand(IsaError):
    pass


# ==================================================================================================
# Flags
# ==================================================================================================
# bit positions in the x86 FLAGS image
_CF, _PF, _AF, _ZF, _SF, _OF = 0, 2, 4, 6, 7, 11
_RESERVED_ONE = 1 << 1


@dataclass(frozen=True)
class Flags:
    zf: int = 0
    cf: int = 0
    sf: int = 0
    of: int = 0
    pf: int = 0
    af: int = 0

    def __post_init__(self):
        for name in ("zf", "cf", "sf", "of", "pf", "af"):
            if getattr(self, name) not in (0, 1):
                raise ValueError(f"flag {name} must be 0 or 1")

    def low_byte(self) -> int:
        """The byte LAHF loads into AH: SF ZF 0 AF 0 PF 1 CF."""
        return (self.sf << _SF | self.zf << _ZF | self.af << _AF | self.pf << _PF
                | self.cf << _CF | _RESERVED_ONE)

    def with_low_byte(self, byte: int) -> "Flags":
        """SAHF: overwrite SF/ZF/AF/PF/CF from ``byte``, keep OF."""
        return Flags(zf=byte >> _ZF & 1, cf=byte >> _CF & 1, sf=byte >> _SF & 1,
                     of=self.of, pf=byte >> _PF & 1, af=byte >> _AF & 1)

    def image(self) -> int:
        """16-bit FLAGS image as pushed by PUSHF."""
        return self.low_byte() | self.of << _OF

    @classmethod
    def from_image(cls, value: int) -> "Flags":
        return cls(zf=value >> _ZF & 1, cf=value >> _CF & 1, sf=value >> _SF & 1,
                   of=value >> _OF & 1, pf=value >> _PF & 1, af=value >> _AF & 1)


# ==================================================================================================
# Instructions
# ==================================================================================================
class Opcode(enum.Enum):
    MOV = "MOV"
    SUB = "SUB"
    CMP = "CMP"
    CMPXCHG = "CMPXCHG"
    JZ = "JZ"
    JE = "JE"
    JMP = "JMP"
    NOP = "NOP"
    LAHF = "LAHF"
    SAHF = "SAHF"
    PUSHF = "PUSHF"
    POPF = "POPF"
    RDTSC = "RDTSC"
    XBEGIN = "XBEGIN"
    XEND = "XEND"
    HALT = "HALT"
    LABEL = "LABEL"

    # identity hash: members are singletons, and Enum's default hashes the name in Python
    __hash__ = object.__hash__


JUMPS = frozenset({Opcode.JZ, Opcode.JE, Opcode.JMP})
FLAG_DEPENDENT_JUMPS = frozenset({Opcode.JZ, Opcode.JE})
FLAG_WRITERS = frozenset({Opcode.SUB, Opcode.CMP, Opcode.CMPXCHG, Opcode.SAHF, Opcode.POPF})
LABELLED = JUMPS | {Opcode.XBEGIN, Opcode.LABEL}

# which flag each conditional jump reads
JUMP_READS = {Opcode.JZ: "zf", Opcode.JE: "zf"}


@dataclass(frozen=True)
class Reg:
    name: str

    def __post_init__(self):
        if self.name not in REGISTERS:
            raise InvalidOperand(f"unknown register {self.name!r}")

    def __str__(self):
        return self.name


@dataclass(frozen=True)
class Imm:
    value: int

    def __str__(self):
        return hex(self.value) if self.value > 9 else str(self.value)


@dataclass(frozen=True)
class Mem:
    base: str
    disp: int = 0

    def __post_init__(self):
        if self.base not in REGISTERS:
            raise InvalidOperand(f"unknown base register {self.base!r}")

    def __str__(self):
        if self.disp:
            sign = "+" if self.disp > 0 else "-"
            return f"[{self.base}{sign}{abs(self.disp):#x}]"
        return f"[{self.base}]"


Operand = Union[Reg, Imm, Mem]


_ARITY = {Opcode.MOV: 2, Opcode.SUB: 2, Opcode.CMP: 2, Opcode.CMPXCHG: 2, Opcode.RDTSC: 1}


@dataclass(frozen=True)
class Instruction:
    opcode: Opcode
    operands: Tuple[Operand, ...] = ()
    label: Optional[str] = None

    def __post_init__(self):
        arity = _ARITY.get(self.opcode, 0)
        if len(self.operands) != arity:
            raise InvalidOperand(f"{self.opcode.value} takes {arity} operand(s)")
        if arity and type(self.operands[0]) is Imm:
            raise InvalidOperand(f"{self.opcode.value} cannot target an immediate")
        if self.opcode in LABELLED and not self.label:
            raise InvalidOperand(f"{self.opcode.value} needs a label")
        if self.opcode not in LABELLED and self.label is not None:
            raise InvalidOperand(f"{self.opcode.value} takes no label")
        if self.opcode is Opcode.CMPXCHG:
            kinds = {type(op) for op in self.operands}
            if len(self.operands) != 2 or kinds != {Mem, Reg}:
                raise InvalidOperand("CMPXCHG takes a memory and a register operand")
        if self.opcode is Opcode.MOV:
            reads = len(self.operands) == 2 and isinstance(self.operands[1], Mem)
        else:
            reads = any(isinstance(op, Mem) for op in self.operands)
        object.__setattr__(self, "reads_memory", reads)
        object.__setattr__(self, "mnemonic", self.opcode.value)

    def __str__(self):
        if self.opcode is Opcode.LABEL:
            return f"{self.label}:"
        parts = [self.opcode.value]
        args = [str(op) for op in self.operands]
        if self.label is not None:
            args.append(self.label)
        if args:
            parts.append(", ".join(args))
        return " ".join(parts)


@dataclass(frozen=True)
class Program(Sequence[Instruction]):
    """An instruction sequence with its resolved label table."""

    instructions: Tuple[Instruction, ...]
    labels: Mapping[str, int] = field(default_factory=dict)

    @classmethod
    def from_instructions(cls, instructions) -> "Program":
        instructions = tuple(instructions)
        labels = {}
        for index, instr in enumerate(instructions):
            if instr.opcode is Opcode.LABEL:
                if instr.label in labels:
                    raise UnknownLabel(f"duplicate label {instr.label!r}")
                labels[instr.label] = index
        for instr in instructions:
            if instr.opcode in LABELLED and instr.label not in labels:
                raise UnknownLabel(f"undefined label {instr.label!r}")
        return cls(instructions, MappingProxyType(labels))

    def __getitem__(self, index):
        return self.instructions[index]

    def __len__(self):
        return len(self.instructions)

    def __eq__(self, other):
        if isinstance(other, Program):
            return self.instructions == other.instructions
        return NotImplemented

    def __hash__(self):
        return hash(self.instructions)


# ==================================================================================================
# Memory and architectural state
# ==================================================================================================
class Privilege(enum.Enum):
    USER = "user"
    KERNEL = "kernel"


@dataclass(frozen=True, eq=False)
class MemorySpace:
    """Byte memory. A page is mapped iff it has a privilege tag; unwritten cells read 0.

    ``readability`` is the co-runner's current effect on how reliably a kernel byte is
    forwarded during a transient window (None: use the MicroConfig value).
    """

    cells: Mapping[int, int] = field(default_factory=dict)
    privilege: Mapping[int, Privilege] = field(default_factory=dict)
    readability: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "privilege", MappingProxyType(dict(self.privilege)))
        object.__setattr__(self, "cells", MappingProxyType(dict(self.cells)))

    def __eq__(self, other):
        if not isinstance(other, MemorySpace):
            return NotImplemented
        return (dict(self.cells) == dict(other.cells)
                and dict(self.privilege) == dict(other.privilege)
                and self.readability == other.readability)

    def page_privilege(self, address: int) -> Privilege:
        try:
            return self.privilege[(address & MASK64) // PAGE_SIZE]
        except KeyError:
            raise UnmappedAddress(address) from None

    def peek(self, address: int) -> int:
        """Read ignoring privilege; still fails on unmapped pages."""
        self.page_privilege(address)
        return self.cells.get(address & MASK64, 0)

    def read(self, address: int) -> int:
        if self.page_privilege(address) is Privilege.KERNEL:
            raise PrivilegedAccess(address)
        return self.cells.get(address & MASK64, 0)

    def write(self, address: int, byte: int) -> "MemorySpace":
        if self.page_privilege(address) is Privilege.KERNEL:
            raise PrivilegedAccess(address)
        cells = dict(self.cells)
        cells[address & MASK64] = byte & 0xFF
        return MemorySpace(cells, self.privilege, self.readability)

    def with_readability(self, readability: Optional[float]) -> "MemorySpace":
        return MemorySpace(self.cells, self.privilege, readability)

    @classmethod
    def build(cls, pages: Mapping[int, Privilege], data: Mapping[int, bytes] = None) -> "MemorySpace":
        """Map ``pages`` (page number -> privilege) and place each byte string at its address."""
        cells = {}
        for base, blob in (data or {}).items():
            for i, byte in enumerate(blob):
                cells[base + i] = byte
        mem = cls(cells, pages)
        for address in cells:
            mem.page_privilege(address)
        return mem


class ArchState:
    """Registers, flags, pc, flag stack and memory. Immutable; use :meth:`evolve`."""

    __slots__ = ("regs", "flags", "pc", "stack", "mem")

    def __init__(self, regs: Mapping[str, int] = None, flags: Flags = Flags(), pc: int = 0,
                 stack: Sequence[int] = (), mem: MemorySpace = None):
        values = dict.fromkeys(REGISTERS, 0)
        for name, value in (regs or {}).items():
            if name not in REGISTERS:
                raise InvalidOperand(f"unknown register {name!r}")
            values[name] = value & MASK64
        if pc < 0:
            raise ValueError("pc must be non-negative")
        self._set(MappingProxyType(values), flags, pc, tuple(v & MASK64 for v in stack),
                  mem if mem is not None else MemorySpace())

    def _set(self, regs, flags, pc, stack, mem):
        object.__setattr__(self, "regs", regs)
        object.__setattr__(self, "flags", flags)
        object.__setattr__(self, "pc", pc)
        object.__setattr__(self, "stack", stack)
        object.__setattr__(self, "mem", mem)

    def __setattr__(self, name, value):
        raise AttributeError("ArchState is immutable")

    @classmethod
    def trusted(cls, regs: dict, flags: Flags, pc: int, stack: tuple, mem: MemorySpace) -> "ArchState":
        """Wrap already-valid components without copying or checking (simulator use)."""
        new = object.__new__(cls)
        new._set(MappingProxyType(regs), flags, pc, stack, mem)
        return new

    def evolve(self, regs=None, flags=None, pc=None, stack=None, mem=None) -> "ArchState":
        """Copy with some fields replaced; trusted internal values, no re-validation."""
        new = object.__new__(ArchState)
        new._set(self.regs if regs is None else regs,
                 self.flags if flags is None else flags,
                 self.pc if pc is None else pc,
                 self.stack if stack is None else stack,
                 self.mem if mem is None else mem)
        return new

    def with_regs(self, **values) -> "ArchState":
        regs = dict(self.regs)
        for name, value in values.items():
            if name not in regs:
                raise InvalidOperand(f"unknown register {name!r}")
            regs[name] = value & MASK64
        return self.evolve(regs=MappingProxyType(regs))

    def __eq__(self, other):
        if not isinstance(other, ArchState):
            return NotImplemented
        return (dict(self.regs) == dict(other.regs) and self.flags == other.flags
                and self.pc == other.pc and self.stack == other.stack and self.mem == other.mem)

    __hash__ = None

    def __repr__(self):
        regs = {k: hex(v) for k, v in self.regs.items() if v}
        return (f"ArchState(regs={regs}, flags={self.flags}, pc={self.pc}, "
                f"stack={self.stack}, mem=<{len(self.mem.cells)} cells>)")


# ==================================================================================================
# Execution
# ==================================================================================================
_ZERO_SET = Flags(zf=1)
_ZERO_CLEAR = Flags(zf=0)


def _sub_flags(a: int, b: int) -> Tuple[int, Flags]:
    # only ZF is modelled; the other status bits are cleared by every flag writer
    result = (a - b) & MASK64
    return result, _ZERO_SET if result == 0 else _ZERO_CLEAR


def jcc_taken(flags: Flags, opcode: Opcode) -> bool:
    if opcode is Opcode.JMP:
        return True
    if opcode in FLAG_DEPENDENT_JUMPS:
        return flags.zf == 1
    raise ValueError(f"{opcode} is not a jump")


def _value(regs, read, operand) -> int:
    kind = type(operand)
    if kind is Reg:
        return regs[operand.name]
    if kind is Imm:
        return operand.value & MASK64
    return read((regs[operand.base] + operand.disp) & MASK64)


def _dest(op: Opcode, operand) -> str:
    if type(operand) is not Reg:
        raise InvalidOperand(f"{op.value} destination must be a register")
    return operand.name


# module-level aliases: enum attribute lookups are slow on the hot path
_CMP = Opcode.CMP
_CMPXCHG = Opcode.CMPXCHG
_HALT = Opcode.HALT
_JMP = Opcode.JMP
_LABEL = Opcode.LABEL
_LAHF = Opcode.LAHF
_MOV = Opcode.MOV
_NOP = Opcode.NOP
_POPF = Opcode.POPF
_PUSHF = Opcode.PUSHF
_RDTSC = Opcode.RDTSC
_SAHF = Opcode.SAHF
_SUB = Opcode.SUB
_XBEGIN = Opcode.XBEGIN
_XEND = Opcode.XEND
_PASSIVE = frozenset((_NOP, _LABEL, _XBEGIN, _XEND))


def step(regs: dict, flags: Flags, pc: int, stack: tuple, mem: MemorySpace, instr: Instruction,
         labels: Mapping[str, int], end: Optional[int], tsc: int = 0, read=None):
    """Retire ``instr`` against unpacked state.

    ``regs`` is updated in place; everything else comes back as
    ``(flags, pc, stack, mem)``. This is the one place instruction semantics
    live: :func:`execute_architectural` and the simulator both call it.
    """
    op = instr.opcode
    if read is None:
        read = mem.read

    if op in _PASSIVE:
        return flags, pc + 1, stack, mem

    if op in JUMPS:
        taken = op is _JMP or flags.zf == 1
        if taken:
            target = labels.get(instr.label)
            if target is None:
                raise UnknownLabel(f"unknown label {instr.label!r}")
            return flags, target, stack, mem
        return flags, pc + 1, stack, mem

    ops = instr.operands
    if op is _MOV:
        dst, src = ops
        if type(dst) is Mem:
            address = (regs[dst.base] + dst.disp) & MASK64
            return flags, pc + 1, stack, mem.write(address, _value(regs, read, src))
        regs[_dest(op, dst)] = _value(regs, read, src)
        return flags, pc + 1, stack, mem

    if op is _SUB:
        dst, src = ops
        name = _dest(op, dst)
        result, flags = _sub_flags(regs[name], _value(regs, read, src))
        regs[name] = result
        return flags, pc + 1, stack, mem

    if op is _CMP:
        _, flags = _sub_flags(_value(regs, read, ops[0]), _value(regs, read, ops[1]))
        return flags, pc + 1, stack, mem

    if op is _CMPXCHG:
        target, source = ops if type(ops[0]) is Mem else ops[::-1]
        current = _value(regs, read, target)
        if regs["rax"] == current:
            address = (regs[target.base] + target.disp) & MASK64
            return _ZERO_SET, pc + 1, stack, mem.write(address, regs[source.name])
        regs["rax"] = current
        return _ZERO_CLEAR, pc + 1, stack, mem

    if op is _LAHF:
        regs["rax"] = regs["rax"] & ~0xFF00 | flags.low_byte() << 8
        return flags, pc + 1, stack, mem

    if op is _SAHF:
        return flags.with_low_byte(regs["rax"] >> 8 & 0xFF), pc + 1, stack, mem

    if op is _PUSHF:
        return flags, pc + 1, stack + (flags.image(),), mem

    if op is _POPF:
        if not stack:
            raise StackUnderflow("POPF on empty stack")
        return Flags.from_image(stack[-1]), pc + 1, stack[:-1], mem

    if op is _RDTSC:
        regs[_dest(op, ops[0])] = tsc & MASK64
        return flags, pc + 1, stack, mem

    if op is _HALT:
        if end is None:
            raise UnknownLabel("HALT needs the enclosing program")
        return flags, end, stack, mem

    raise InvalidOperand(f"cannot execute {op}")  # pragma: no cover


def execute_architectural(state: ArchState, instr: Instruction, program: Optional[Program] = None,
                          *, tsc: int = 0, load=None) -> ArchState:
    """Return the successor of ``state`` after retiring ``instr``.

    ``program`` resolves jump targets and the HALT position, ``tsc`` is the value
    RDTSC observes. ``load`` replaces memory reads (address -> byte); the transient
    core uses it to forward a kernel byte, nothing else should.
    """
    regs = dict(state.regs)
    labels = program.labels if program is not None else {}
    end = len(program) if program is not None else None
    flags, pc, stack, mem = step(regs, state.flags, state.pc, state.stack, state.mem, instr,
                                 labels, end, tsc, load)
    return state.evolve(regs=MappingProxyType(regs), flags=flags, pc=pc, stack=stack, mem=mem)
