import pytest
from hypothesis import given
from hypothesis import strategies as st

from flagtime.asm import AssemblyError, DuplicateLabel, UndefinedLabel, assemble, disassemble
from flagtime.isa import REGISTERS, Imm, Instruction, Mem, Opcode, Program, Reg


def test_jump_block_with_two_labels():
    program = assemble("JZ equal; JMP notequal; equal: NOP; notequal: NOP")
    body = [i for i in program if i.opcode is not Opcode.LABEL]
    assert len(body) == 4
    assert sorted(program.labels) == ["equal", "notequal"]


def test_empty_source():
    assert len(assemble("")) == 0
    assert len(assemble("  \n # nothing\n")) == 0


def test_rept_inline():
    program = assemble(".rept 6 NOP .endr")
    assert [i.opcode for i in program] == [Opcode.NOP] * 6


def test_rept_multiline_nested():
    program = assemble(".rept 2\nNOP\n.rept 3\nLAHF\n.endr\n.endr")
    assert [i.opcode.value for i in program] == (["NOP"] + ["LAHF"] * 3) * 2


def test_parse_error_reports_line():
    with pytest.raises(AssemblyError) as info:
        assemble("NOP\nNOP\nFROB rax")
    assert info.value.line == 3


@pytest.mark.parametrize("source,error", [
    ("a: NOP\na: NOP", DuplicateLabel),
    ("JZ missing", UndefinedLabel),
    (".rept 2\nx: NOP\n.endr", DuplicateLabel),
    (".rept 2 NOP", AssemblyError),
    (".endr", AssemblyError),
    ("MOV rax", AssemblyError),
    ("MOV eax, 1", AssemblyError),
])
def test_assembly_errors(source, error):
    with pytest.raises(error):
        assemble(source)


def test_comments_and_memory_operands():
    program = assemble("MOV rax, [rcx+0x10] // load\nSUB rbx, [rcx - 2] # other\nMOV [rsi], rax")
    assert program[0].operands == (Reg("rax"), Mem("rcx", 0x10))
    assert program[1].operands == (Reg("rbx"), Mem("rcx", -2))
    assert program[2].operands == (Mem("rsi"), Reg("rax"))


# --------------------------------------------------------------------------------------------------
regs = st.sampled_from(REGISTERS).map(Reg)
imms = st.integers(0, 2 ** 64 - 1).map(Imm)
mems = st.builds(Mem, st.sampled_from(REGISTERS), st.integers(-4096, 4096))
labels = st.sampled_from(["a", "b", "loop", "end_1"])


@st.composite
def programs(draw):
    names = draw(st.lists(labels, unique=True, min_size=1, max_size=4))
    body = []
    for _ in range(draw(st.integers(0, 12))):
        kind = draw(st.sampled_from(["mov", "movm", "store", "sub", "cmp", "xchg", "jump", "plain",
                                     "rdtsc"]))
        if kind == "mov":
            body.append(Instruction(Opcode.MOV, (draw(regs), draw(st.one_of(regs, imms)))))
        elif kind == "movm":
            body.append(Instruction(Opcode.MOV, (draw(regs), draw(mems))))
        elif kind == "store":
            body.append(Instruction(Opcode.MOV, (draw(mems), draw(regs))))
        elif kind in ("sub", "cmp"):
            op = Opcode.SUB if kind == "sub" else Opcode.CMP
            body.append(Instruction(op, (draw(regs), draw(st.one_of(regs, imms, mems)))))
        elif kind == "xchg":
            body.append(Instruction(Opcode.CMPXCHG, (draw(mems), draw(regs))))
        elif kind == "jump":
            op = draw(st.sampled_from([Opcode.JZ, Opcode.JE, Opcode.JMP, Opcode.XBEGIN]))
            body.append(Instruction(op, label=draw(st.sampled_from(names))))
        elif kind == "rdtsc":
            body.append(Instruction(Opcode.RDTSC, (draw(regs),)))
        else:
            body.append(Instruction(draw(st.sampled_from(
                [Opcode.NOP, Opcode.LAHF, Opcode.SAHF, Opcode.PUSHF, Opcode.POPF, Opcode.XEND,
                 Opcode.HALT]))))
    for name in names:
        body.insert(draw(st.integers(0, len(body))), Instruction(Opcode.LABEL, label=name))
    return Program.from_instructions(body)


@given(programs())
def test_round_trip(program):
    text = disassemble(program)
    again = assemble(text)
    assert again == program
    assert dict(again.labels) == dict(program.labels)
    assert disassemble(again) == text


def test_deterministic():
    src = "RDTSC r15\nMOV rcx, 0x10\nXBEGIN f\nSUB rbx, [rcx]\nXEND\nf:\nJZ f"
    assert assemble(src) == assemble(src)
