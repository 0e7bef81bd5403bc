"""Cycle-level simulator of a transient EFLAGS timing channel.

Submodules: ``isa`` (instructions and architectural state), ``asm``
(assembler), ``core`` (pipeline timing and transient execution), ``attack``
(attacker loop and leak reports), ``analysis`` (decoder statistics),
``mitigation`` (gadgets and their evaluation), ``cli``.
"""
__version__ = "0.1.0"

from .analysis import (  # noqa: E402
    Histogram,
    MeanProfile,
    SweepResult,
    argmax_histogram,
    decoder_accuracy,
    mean_profile,
    stall_window_sweep,
)
from .asm import assemble, disassemble  # noqa: E402
from .attack import (  # noqa: E402
    AttackConfig,
    DecodeRule,
    LeakReport,
    PassRecord,
    VictimSpec,
    build_attack_program,
    leak_byte,
    leak_string,
    run_pass,
)
from .core import MicroConfig, NoiseKind, NoiseModel, Simulator, Suppression, run  # noqa: E402
from .gadgets import Gadget, GadgetKind, apply_gadget  # noqa: E402
from .isa import ArchState, Flags, Instruction, MemorySpace, Opcode, Program  # noqa: E402
from .mitigation import MitigationReport, evaluate_mitigation  # noqa: E402
