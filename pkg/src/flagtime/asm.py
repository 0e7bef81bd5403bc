"""Text assembler / disassembler for the flagtime ISA.

Syntax is Intel order (``SUB rbx, [rcx]``). Statements are separated by
newlines or ``;``, ``label:`` may prefix a statement, ``#`` and ``//`` start
comments, and ``.rept N`` ... ``.endr`` repeats its body N times.
"""
from __future__ import annotations

import re
from typing import List, Tuple

from .isa import (
    LABELLED,
    Imm,
    Instruction,
    InvalidOperand,
    Mem,
    Opcode,
    Program,
    Reg,
    REGISTERS,
)


class AssemblyError(ValueError):
    def __init__(self, message: str, line: int = 0):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line


class DuplicateLabel(AssemblyError):
    pass


class UndefinedLabel(AssemblyError):
    pass


_DIRECTIVE = re.compile(r"(\.rept\s+\S+|\.endr\b)", re.IGNORECASE)
_LABEL_PREFIX = re.compile(r"^\s*([A-Za-z_.][\w.]*)\s*:")
_MEM = re.compile(r"^\[\s*(\w+)\s*(?:([+-])\s*(\w+)\s*)?\]$")
_IDENT = re.compile(r"^[A-Za-z_.][\w.]*$")


def _parse_int(text: str, line: int) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise AssemblyError(f"bad integer {text!r}", line) from None


def _parse_operand(text: str, line: int):
    text = text.strip()
    low = text.lower()
    if low in REGISTERS:
        return Reg(low)
    m = _MEM.match(low)
    if m:
        base, sign, disp = m.groups()
        if base not in REGISTERS:
            raise AssemblyError(f"bad base register {base!r}", line)
        offset = _parse_int(disp, line) if disp else 0
        return Mem(base, -offset if sign == "-" else offset)
    if re.match(r"^-?(0x[0-9a-f]+|\d+)$", low):
        return Imm(_parse_int(low, line))
    raise AssemblyError(f"bad operand {text!r}", line)


def _statements(source: str) -> List[Tuple[str, int]]:
    out = []
    for lineno, raw in enumerate(source.splitlines(), start=1):
        raw = raw.split("#", 1)[0].split("//", 1)[0]
        for chunk in raw.split(";"):
            for piece in _DIRECTIVE.split(chunk):
                # peel off any number of "name:" prefixes
                while True:
                    m = _LABEL_PREFIX.match(piece)
                    if not m:
                        break
                    out.append((m.group(1) + ":", lineno))
                    piece = piece[m.end():]
                if piece.strip():
                    out.append((piece.strip(), lineno))
    return out


def _parse_statement(text: str, line: int) -> Instruction:
    if text.endswith(":"):
        return Instruction(Opcode.LABEL, label=text[:-1])
    mnemonic, _, rest = text.partition(" ")
    try:
        opcode = Opcode(mnemonic.upper())
    except ValueError:
        raise AssemblyError(f"unknown mnemonic {mnemonic!r}", line) from None
    if opcode is Opcode.LABEL:
        raise AssemblyError("LABEL is written as 'name:'", line)
    args = [a for a in (s.strip() for s in rest.split(",")) if a] if rest.strip() else []
    try:
        if opcode in LABELLED:
            if len(args) != 1 or not _IDENT.match(args[0]):
                raise AssemblyError(f"{opcode.value} takes exactly one label", line)
            return Instruction(opcode, label=args[0])
        return Instruction(opcode, tuple(_parse_operand(a, line) for a in args))
    except InvalidOperand as exc:
        raise AssemblyError(str(exc), line) from None


def assemble(source: str) -> Program:
    stack: List[Tuple[int, List[Instruction], int]] = []
    body: List[Instruction] = []
    defined = {}
    for text, line in _statements(source):
        low = text.lower()
        if low.startswith(".rept"):
            count = _parse_int(text.split()[1], line)
            if count < 0:
                raise AssemblyError(".rept count must be non-negative", line)
            stack.append((count, body, line))
            body = []
            continue
        if low == ".endr":
            if not stack:
                raise AssemblyError(".endr without .rept", line)
            count, outer, _ = stack.pop()
            if count > 1 and any(i.opcode is Opcode.LABEL for i in body):
                raise DuplicateLabel("label inside repeated block", line)
            outer.extend(body * count)
            body = outer
            continue
        instr = _parse_statement(text, line)
        if instr.opcode is Opcode.LABEL:
            if instr.label in defined:
                raise DuplicateLabel(f"label {instr.label!r} already defined on line "
                                     f"{defined[instr.label]}", line)
            defined[instr.label] = line
        body.append(instr)
    if stack:
        raise AssemblyError(".rept without .endr", stack[-1][2])
    for instr in body:
        if instr.opcode in LABELLED and instr.opcode is not Opcode.LABEL and instr.label not in defined:
            raise UndefinedLabel(f"undefined label {instr.label!r}")
    return Program.from_instructions(body)


def disassemble(program) -> str:
    return "\n".join(str(instr) for instr in program) + ("\n" if len(program) else "")
