"""Reversible byte-level tokenizer with reserved special tokens.

Layout: ids 0..255 are raw UTF-8 bytes, 256=PAD, 257=BOS, 258=EOS, 259=SEP.
No merges ever happen, so the token count of a concatenation is the sum of
the token counts, which keeps prompt-length accounting exact.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ContractViolation

PAD = 256
BOS = 257
EOS = 258
SEP = 259
VOCAB_SIZE = 260

SPECIALS = frozenset({PAD, BOS, EOS, SEP})

# Printable stand-in for SEP: backbones are pretrained on plain text where a
# newline plays the separator role, and the SEP embedding row is copied from
# it before freezing (see backbone.pretrain_backbone).
SEP_SURROGATE = ord("\n")


@dataclass(frozen=True)
class Vocab:
    size: int = VOCAB_SIZE
    pad: int = PAD
    bos: int = BOS
    eos: int = EOS
    sep: int = SEP

    def layout(self) -> dict:
        """Vocab description embedded in checkpoint metadata."""
        return {"bytes": [0, 255], "PAD": self.pad, "BOS": self.bos,
                "EOS": self.eos, "SEP": self.sep, "size": self.size}


def encode(text: str, add_bos: bool = False, add_eos: bool = False) -> list[int]:
    ids = list(text.encode("utf-8"))
    if add_bos:
        ids.insert(0, BOS)
    if add_eos:
        ids.append(EOS)
    return ids


def decode_checked(ids) -> tuple[str, bool]:
    """Decode ids to text, reporting whether lossy replacement happened."""
    raw = []
    for i in ids:
        i = int(i)
        if not 0 <= i < VOCAB_SIZE:
            raise ContractViolation(f"token id {i} outside vocab of size {VOCAB_SIZE}")
        if i < 256:
            raw.append(i)
    data = bytes(raw)
    try:
        return data.decode("utf-8"), False
    except UnicodeDecodeError:
        return data.decode("utf-8", errors="replace"), True


def decode(ids) -> str:
    return decode_checked(ids)[0]
