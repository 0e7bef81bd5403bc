"""Mitigation gadgets as program transformations.

A gadget goes right before the first flag-dependent jump that follows a
transaction: either a run of NOPs that lets the revert stall expire, or a
flag round-trip (LAHF;SAHF or PUSHF;POPF) whose architectural flag write
clears the pending revert.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional

from .isa import (
    FLAG_DEPENDENT_JUMPS,
    ArchState,
    Instruction,
    Opcode,
    Program,
    execute_architectural,
)


class GadgetKind(str, enum.Enum):
    DELAY = "delay"
    LAHF_SAHF = "lahf_sahf"
    PUSHF_POPF = "pushf_popf"
    HARDWARE_OFF = "hardware_off"


DEFAULT_DELAY = 6


class GadgetError(ValueError):
    pass


@dataclass(frozen=True)
class Gadget:
    kind: GadgetKind
    delay_count: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "kind", GadgetKind(self.kind))
        if self.kind is GadgetKind.DELAY:
            if self.delay_count is None:
                object.__setattr__(self, "delay_count", DEFAULT_DELAY)
            if self.delay_count < 1:
                raise GadgetError("delay gadget needs at least one NOP")
        elif self.delay_count is not None:
            raise GadgetError(f"{self.kind.value} takes no count")

    @property
    def name(self) -> str:
        if self.kind is GadgetKind.DELAY:
            return f"delay:{self.delay_count}"
        return self.kind.value

    @classmethod
    def parse(cls, text: str) -> "Gadget":
        """``delay``, ``delay:10``, ``lahf_sahf``, ``pushf_popf`` or ``hardware_off``."""
        kind, _, count = text.strip().partition(":")
        try:
            kind = GadgetKind(kind.lower())
        except ValueError:
            raise GadgetError(f"unknown gadget {text!r}") from None
        if count:
            try:
                return cls(kind, int(count, 0))
            except ValueError:
                raise GadgetError(f"bad gadget count in {text!r}") from None
        return cls(kind)

    def instructions(self):
        if self.kind is GadgetKind.DELAY:
            return (Instruction(Opcode.NOP),) * self.delay_count
        if self.kind is GadgetKind.LAHF_SAHF:
            return (Instruction(Opcode.LAHF), Instruction(Opcode.SAHF))
        if self.kind is GadgetKind.PUSHF_POPF:
            return (Instruction(Opcode.PUSHF), Instruction(Opcode.POPF))
        return ()


def guarded_jump(program: Program) -> int:
    """Index of the first JZ/JE after a transaction begins."""
    seen_tx = False
    for index, instr in enumerate(program):
        if instr.opcode is Opcode.XBEGIN:
            seen_tx = True
        elif seen_tx and instr.opcode in FLAG_DEPENDENT_JUMPS:
            return index
    raise GadgetError("no flag-dependent jump after a transaction")


def apply_gadget(program: Program, gadget: Gadget) -> Program:
    at = guarded_jump(program)
    body = program.instructions
    return Program.from_instructions(body[:at] + gadget.instructions() + body[at:])


def flag_rewrite_semantics(state: ArchState, gadget: Gadget) -> ArchState:
    """Architectural effect of a rewrite gadget's instructions, run in sequence."""
    if gadget.kind not in (GadgetKind.LAHF_SAHF, GadgetKind.PUSHF_POPF):
        raise GadgetError(f"{gadget.name} is not a flag-rewrite gadget")
    for instr in gadget.instructions():
        state = execute_architectural(state, instr)
    return state
