"""Byte-level demo tokenizer: byte ``b`` is token ``b``; two reserved ids follow the bytes."""

from typing import Dict, Iterable, List

BYTE_VOCAB = 256
MASK_ID = 256
PAD_ID = 257
MIN_VOCAB = 258


def reserved_ids() -> Dict[str, int]:
    return {"mask": MASK_ID, "pad": PAD_ID}


def tokenize_bytes(text: str) -> List[int]:
    return list(text.encode("utf-8"))


def _render(token: int) -> bytes:
    if 0 <= token < BYTE_VOCAB:
        return bytes([token])
    if token == MASK_ID:
        return b"[MASK]"
    if token == PAD_ID:
        return b"[PAD]"
    return f"<|{token}|>".encode("ascii")


def detokenize(ids: Iterable[int]) -> str:
    """Inverse of ``tokenize_bytes``; ids outside the byte range render as escapes."""
    raw = b"".join(_render(int(t)) for t in ids)
    return raw.decode("utf-8", errors="backslashreplace")
