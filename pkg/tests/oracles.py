"""Independent re-implementations used as test oracles.

Everything here is deliberately written without importing from the package:
a second parser built on manual string scanning, a retyped classification
table, and a hash pipeline on top of the from-scratch SHA-256 in
sha256_ref.py. Keep it that way; the whole point is a disjoint code path.
"""

from __future__ import annotations

from sha256_ref import sha256

ORACLE_JUMPS = {
    "jmp",
    "ja", "jae", "jb", "jbe", "jc", "je", "jg", "jge", "jl", "jle",
    "jna", "jnae", "jnb", "jnbe", "jnc", "jne", "jng", "jnge", "jnl",
    "jnle", "jno", "jnp", "jns", "jnz", "jo", "jp", "jpe", "jpo", "js", "jz",
    "jcxz", "jecxz", "jrcxz",
    "loop", "loope", "loopne", "loopnz", "loopz",
}
ORACLE_CALLS = {"call", "callq", "lcall"}
ORACLE_RETURNS = {"ret", "retq", "retn", "retf", "iret", "iretd", "iretq"}

_LOWER = set("abcdefghijklmnopqrstuvwxyz")
_LOWER_NUM = _LOWER | set("0123456789")
_HEX = set("0123456789abcdef")


class OracleMalformed(Exception):
    def __init__(self, line_no: int):
        super().__init__(f"line {line_no}")
        self.line_no = line_no


def _cut_comment(line: str) -> str:
    out = []
    for ch in line:
        if ch in (";", "#"):
            break
        out.append(ch)
    return "".join(out)


def _is_address_token(token: str) -> bool:
    if not token.startswith("0x") or not token.endswith(":"):
        return False
    body = token[2:-1]
    return len(body) > 0 and all(ch in _HEX for ch in body)


def _is_bare_mnemonic(token: str) -> bool:
    if not token or token[0] not in _LOWER:
        return False
    return all(ch in _LOWER_NUM for ch in token)


def oracle_parse(text: str) -> list[str]:
    """Return the mnemonics of the instruction lines, in order."""
    mnemonics: list[str] = []
    line_no = 0
    for raw in text.split("\n"):
        line_no += 1
        content = _cut_comment(raw).strip()
        if not content:
            continue
        pieces = content.split()
        head = pieces[0]
        if head.startswith("0x") and ":" in head:
            # address may be glued to the mnemonic ("0x1:mov") or separate
            addr, _, glued = head.partition(":")
            if not (_is_address_token(addr + ":")):
                continue
            if glued:
                mnemonics.append(glued.lower())
            elif len(pieces) > 1:
                mnemonics.append(pieces[1].lower())
            else:
                raise OracleMalformed(line_no)
        elif _is_bare_mnemonic(head):
            mnemonics.append(head)
        else:
            continue
    return mnemonics


def oracle_sequences(mnemonics: list[str]) -> tuple[list[str], list[str], list[str]]:
    jumps = [m for m in mnemonics if m in ORACLE_JUMPS]
    calls = [m for m in mnemonics if m in ORACLE_CALLS]
    returns = [m for m in mnemonics if m in ORACLE_RETURNS]
    return jumps, calls, returns


def oracle_hash_sequence(tokens: list[str]) -> bytes:
    return sha256("\n".join(tokens).encode("utf-8"))


def oracle_fingerprint(text: str) -> bytes:
    """Full independent pipeline: parse, filter, hash, hash-of-hashes."""
    jumps, calls, returns = oracle_sequences(oracle_parse(text))
    digests = b"".join(
        oracle_hash_sequence(seq) for seq in (jumps, calls, returns)
    )
    return sha256(digests)
