"""Synthetic assembly listings with a configurable control-instruction mix.

Used by the scaling and statistics tests, and handy for demo scenarios. The
default mix (15.45% jumps, 4.81% calls, 0.57% returns, ~20.8% control flow
overall) matches what large JIT-compiled server workloads typically show.
"""

from __future__ import annotations

import random
from dataclasses import dataclass

DEFAULT_JUMP_FRACTION = 0.1545
DEFAULT_CALL_FRACTION = 0.0481
DEFAULT_RETURN_FRACTION = 0.0057

_JUMP_POOL = ("jmp", "je", "jne", "jg", "jge", "jl", "jle", "ja", "jb", "js", "jz", "loop")
_CALL_POOL = ("call", "callq")
_RETURN_POOL = ("ret", "retq")
_FILLER_POOL = (
    "mov", "add", "sub", "lea", "xor", "and", "or", "shl", "shr",
    "cmp", "test", "push", "pop", "movzx", "imul", "inc", "dec", "nop",
)
_REGISTERS = ("rax", "rbx", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11")


@dataclass(frozen=True)
class GenerationTally:
    """The generator's own count of what it emitted, for cross-checking."""

    total_instructions: int
    jump_count: int
    call_count: int
    return_count: int

    @property
    def cfi_count(self) -> int:
        return self.jump_count + self.call_count + self.return_count


def _operands(rng: random.Random, mnemonic: str, address: int) -> str:
    if mnemonic in _JUMP_POOL or mnemonic in _CALL_POOL:
        return f"0x{address + rng.randint(8, 4096):x}"
    if mnemonic in _RETURN_POOL or mnemonic == "nop":
        return ""
    if mnemonic in ("push", "pop", "inc", "dec"):
        return rng.choice(_REGISTERS)
    return f"{rng.choice(_REGISTERS)}, {rng.choice(_REGISTERS)}"


def generate_listing(
    total_instructions: int,
    jump_fraction: float = DEFAULT_JUMP_FRACTION,
    call_fraction: float = DEFAULT_CALL_FRACTION,
    return_fraction: float = DEFAULT_RETURN_FRACTION,
    seed: int = 0,
    exact: bool = False,
) -> tuple[str, GenerationTally]:
    """Emit a listing of ``total_instructions`` lines plus its class tally.

    With ``exact=False`` each instruction's class is drawn independently with
    the given probabilities; with ``exact=True`` the class counts are fixed at
    round(total * fraction) and only positions are shuffled. Blank and
    comment lines are sprinkled in and do not count as instructions.
    """
    if total_instructions < 0:
        raise ValueError("total_instructions must be non-negative")
    if jump_fraction + call_fraction + return_fraction > 1.0:
        raise ValueError("class fractions exceed 1.0")

    rng = random.Random(seed)
    if exact:
        jump_count = round(total_instructions * jump_fraction)
        call_count = round(total_instructions * call_fraction)
        return_count = round(total_instructions * return_fraction)
        classes = (
            ["j"] * jump_count
            + ["c"] * call_count
            + ["r"] * return_count
            + ["f"] * (total_instructions - jump_count - call_count - return_count)
        )
        rng.shuffle(classes)
    else:
        cut_jump = jump_fraction
        cut_call = cut_jump + call_fraction
        cut_return = cut_call + return_fraction
        classes = []
        for _ in range(total_instructions):
            draw = rng.random()
            if draw < cut_jump:
                classes.append("j")
            elif draw < cut_call:
                classes.append("c")
            elif draw < cut_return:
                classes.append("r")
            else:
                classes.append("f")

    lines: list[str] = ["# synthetic listing", ""]
    address = 0x10000
    jump_count = call_count = return_count = 0
    for n, cls in enumerate(classes):
        if cls == "j":
            mnemonic = rng.choice(_JUMP_POOL)
            jump_count += 1
        elif cls == "c":
            mnemonic = rng.choice(_CALL_POOL)
            call_count += 1
        elif cls == "r":
            mnemonic = rng.choice(_RETURN_POOL)
            return_count += 1
        else:
            mnemonic = rng.choice(_FILLER_POOL)
        ops = _operands(rng, mnemonic, address)
        lines.append(f"0x{address:08x}: {mnemonic} {ops}".rstrip())
        address += rng.randint(1, 8)
        if n % 500 == 499:
            lines.append(f"; block {n // 500}")

    lines.append("")
    tally = GenerationTally(
        total_instructions=len(classes),
        jump_count=jump_count,
        call_count=call_count,
        return_count=return_count,
    )
    return "\n".join(lines), tally


def listing_with_cfi_count(cfi_count: int, seed: int = 0) -> tuple[str, GenerationTally]:
    """Listing whose control-flow instruction count is exactly ``cfi_count``.

    The control classes keep the default mix's internal proportions and the
    non-control remainder is sized so the overall CFI share stays ~20.8%.
    """
    cfi_share = DEFAULT_JUMP_FRACTION + DEFAULT_CALL_FRACTION + DEFAULT_RETURN_FRACTION
    jump_count = round(cfi_count * DEFAULT_JUMP_FRACTION / cfi_share)
    call_count = round(cfi_count * DEFAULT_CALL_FRACTION / cfi_share)
    return_count = cfi_count - jump_count - call_count
    total = round(cfi_count / cfi_share)

    rng = random.Random(seed)
    classes = (
        ["j"] * jump_count
        + ["c"] * call_count
        + ["r"] * return_count
        + ["f"] * max(0, total - cfi_count)
    )
    rng.shuffle(classes)

    lines: list[str] = []
    address = 0x10000
    for cls in classes:
        if cls == "j":
            mnemonic = rng.choice(_JUMP_POOL)
        elif cls == "c":
            mnemonic = rng.choice(_CALL_POOL)
        elif cls == "r":
            mnemonic = rng.choice(_RETURN_POOL)
        else:
            mnemonic = rng.choice(_FILLER_POOL)
        ops = _operands(rng, mnemonic, address)
        lines.append(f"0x{address:08x}: {mnemonic} {ops}".rstrip())
        address += rng.randint(1, 8)
    lines.append("")

    tally = GenerationTally(
        total_instructions=len(classes),
        jump_count=jump_count,
        call_count=call_count,
        return_count=return_count,
    )
    return "\n".join(lines), tally
