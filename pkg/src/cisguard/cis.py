"""Control-instruction-sequence (CIS) profiling of assembly listings.

A process listing is reduced to the ordered sequences of its jump, call and
return mnemonics. Each sequence is hashed, and the three digests are hashed
again into a single combined digest that identifies the process run. Two
copies of a process match exactly when their control structure matches, no
matter how large the rest of the code is.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from typing import Iterable


class ControlClass(Enum):
    JUMP = "jump"
    CALL = "call"
    RETURN = "return"
    NONE = "none"


# Intel x86 control-transfer mnemonics, grouped by the class they trigger.
# Unconditional jmp, the full Jcc set, the cx-register branch forms and the
# loop family all redirect control, so they count as jumps.
JUMP_MNEMONICS = frozenset({
    "jmp",
    "ja", "jae", "jb", "jbe", "jc", "je", "jg", "jge", "jl", "jle",
    "jna", "jnae", "jnb", "jnbe", "jnc", "jne", "jng", "jnge", "jnl",
    "jnle", "jno", "jnp", "jns", "jnz", "jo", "jp", "jpe", "jpo", "js", "jz",
    "jcxz", "jecxz", "jrcxz",
    "loop", "loope", "loopne", "loopnz", "loopz",
})

CALL_MNEMONICS = frozenset({"call", "callq", "lcall"})

RETURN_MNEMONICS = frozenset({"ret", "retq", "retn", "retf", "iret", "iretd", "iretq"})


class MalformedLine(ValueError):
    """An address-prefixed line with no mnemonic token after the colon."""

    def __init__(self, line_no: int):
        super().__init__(f"line {line_no}: address prefix with no mnemonic")
        self.line_no = line_no


@dataclass(frozen=True)
class Instruction:
    index: int
    mnemonic: str
    operands: str
    control_class: ControlClass


@dataclass(frozen=True)
class Program:
    process_id: str
    instructions: tuple[Instruction, ...]
    source_path: str = ""


@dataclass(frozen=True)
class CisProfile:
    jumps: tuple[str, ...]
    calls: tuple[str, ...]
    returns: tuple[str, ...]


@dataclass(frozen=True)
class Fingerprint:
    """Per-sequence digests plus the combined digest that travels the wire.

    ``process_id`` is carried as metadata only; it never enters any digest,
    so the same code profiled on different nodes or under different names
    produces byte-identical digests.
    """

    process_id: str
    jump_digest: bytes
    call_digest: bytes
    return_digest: bytes
    combined: bytes

    @property
    def combined_hex(self) -> str:
        return self.combined.hex()


@dataclass(frozen=True)
class CfiStats:
    total_instructions: int
    cfi_count: int
    jump_count: int
    call_count: int
    return_count: int
    cfi_fraction: float
    jump_fraction: float
    call_fraction: float
    return_fraction: float


def classify_mnemonic(mnemonic: str) -> ControlClass:
    """Classify a lowercase mnemonic. Total: unknown tokens map to NONE."""
    if mnemonic in JUMP_MNEMONICS:
        return ControlClass.JUMP
    if mnemonic in CALL_MNEMONICS:
        return ControlClass.CALL
    if mnemonic in RETURN_MNEMONICS:
        return ControlClass.RETURN
    return ControlClass.NONE


# An instruction line is either address-prefixed ("0x7f01: mov eax, 1") or a
# bare mnemonic line ("mov eax, 1"). Bare lines are accepted only when the
# first token already looks like a lowercase mnemonic; anything else (log
# headers, "[Entry Point]" markers, prose) is metadata and skipped.
_ADDR_PREFIX = re.compile(r"^(0x[0-9a-f]+):\s*")
_BARE_MNEMONIC = re.compile(r"^[a-z][a-z0-9]*$")


def _strip_comment(line: str) -> str:
    for marker in (";", "#"):
        cut = line.find(marker)
        if cut != -1:
            line = line[:cut]
    return line


def parse_assembly(text: str, process_id: str, source_path: str = "") -> Program:
    """Parse a listing into a Program, skipping non-instruction lines.

    Raises MalformedLine (with a 1-based line number) when a line carries an
    address prefix but no mnemonic after it. Unrecognized mnemonics are kept
    with class NONE so listings from newer ISAs still profile cleanly.
    """
    instructions: list[Instruction] = []
    for line_no, raw in enumerate(text.split("\n"), start=1):
        stripped = _strip_comment(raw).strip()
        if not stripped:
            continue

        addr = _ADDR_PREFIX.match(stripped)
        if addr:
            rest = stripped[addr.end():]
            if not rest:
                raise MalformedLine(line_no)
            parts = rest.split(maxsplit=1)
        else:
            parts = stripped.split(maxsplit=1)
            if not _BARE_MNEMONIC.match(parts[0]):
                continue

        mnemonic = parts[0].lower()
        operands = parts[1].strip() if len(parts) > 1 else ""
        instructions.append(
            Instruction(
                index=len(instructions),
                mnemonic=mnemonic,
                operands=operands,
                control_class=classify_mnemonic(mnemonic),
            )
        )

    return Program(process_id=process_id, instructions=tuple(instructions), source_path=source_path)


def _token(instr: Instruction, include_operands: bool) -> str:
    if include_operands and instr.operands:
        return f"{instr.mnemonic} {' '.join(instr.operands.split())}"
    return instr.mnemonic


def extract_cis(program: Program, include_operands: bool = False) -> CisProfile:
    """Build the three control-instruction sequences in program order.

    Tokens default to the bare mnemonic: JIT listings embed absolute
    addresses that legitimately differ between nodes, and including them
    would make identical logic fingerprint differently. Pass
    ``include_operands=True`` to fold whitespace-normalized operands in.
    """
    jumps: list[str] = []
    calls: list[str] = []
    returns: list[str] = []
    for instr in program.instructions:
        if instr.control_class is ControlClass.JUMP:
            jumps.append(_token(instr, include_operands))
        elif instr.control_class is ControlClass.CALL:
            calls.append(_token(instr, include_operands))
        elif instr.control_class is ControlClass.RETURN:
            returns.append(_token(instr, include_operands))
    return CisProfile(jumps=tuple(jumps), calls=tuple(calls), returns=tuple(returns))


def hash_sequence(seq: Iterable[str]) -> bytes:
    """SHA-256 of the tokens joined by 0x0A; empty sequence hashes b""."""
    return hashlib.sha256("\n".join(seq).encode("utf-8")).digest()


def fingerprint(profile: CisProfile, process_id: str) -> Fingerprint:
    """Hash each sequence, then hash the concatenated digests."""
    jump_digest = hash_sequence(profile.jumps)
    call_digest = hash_sequence(profile.calls)
    return_digest = hash_sequence(profile.returns)
    combined = hashlib.sha256(jump_digest + call_digest + return_digest).digest()
    return Fingerprint(
        process_id=process_id,
        jump_digest=jump_digest,
        call_digest=call_digest,
        return_digest=return_digest,
        combined=combined,
    )


def cfi_stats(program: Program) -> CfiStats:
    """Count control-flow instructions and their share of the listing."""
    jump_count = call_count = return_count = 0
    for instr in program.instructions:
        if instr.control_class is ControlClass.JUMP:
            jump_count += 1
        elif instr.control_class is ControlClass.CALL:
            call_count += 1
        elif instr.control_class is ControlClass.RETURN:
            return_count += 1

    total = len(program.instructions)
    cfi_count = jump_count + call_count + return_count
    if total > 0:
        fractions = (cfi_count / total, jump_count / total, call_count / total, return_count / total)
    else:
        fractions = (0.0, 0.0, 0.0, 0.0)
    return CfiStats(
        total_instructions=total,
        cfi_count=cfi_count,
        jump_count=jump_count,
        call_count=call_count,
        return_count=return_count,
        cfi_fraction=fractions[0],
        jump_fraction=fractions[1],
        call_fraction=fractions[2],
        return_fraction=fractions[3],
    )


def profile_listing(
    text: str,
    process_id: str,
    source_path: str = "",
    include_operands: bool = False,
) -> tuple[Program, CisProfile, Fingerprint, CfiStats]:
    """Run the whole local pipeline: parse, extract, fingerprint, count."""
    program = parse_assembly(text, process_id, source_path)
    profile = extract_cis(program, include_operands=include_operands)
    return program, profile, fingerprint(profile, process_id), cfi_stats(program)
