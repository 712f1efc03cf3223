"""Word-level tokenizer over the closed toy-grammar vocabulary."""

from __future__ import annotations

from dataclasses import dataclass

from . import toydata

PAD, BOS, EOS, UNK, PSEUDO = 0, 1, 2, 3, 4
RESERVED = ("<pad>", "<bos>", "<eos>", "<unk>", "$")
PLACEHOLDER = "$"

_WORDS = sorted(
    set(toydata.SHAPES)
    | set(toydata.COLORS)
    | set(toydata.SIZES)
    | set(toydata.POSITIONS)
    | set(toydata.BACKGROUNDS)
    | set(toydata.CAPTION_WORDS)
    | set(toydata.EDIT_WORDS)
    | set(toydata.TEMPLATE_WORDS)
)
VOCAB: tuple[str, ...] = RESERVED + tuple(_WORDS)
WORD_TO_ID = {w: i for i, w in enumerate(VOCAB)}


@dataclass(frozen=True)
class TokenSequence:
    token_ids: tuple[int, ...]
    pseudo_slot: int | None = None

    def __post_init__(self):
        hits = [i for i, t in enumerate(self.token_ids) if t == PSEUDO]
        if self.pseudo_slot is None:
            if hits:
                raise ValueError("placeholder present but pseudo_slot unset")
        elif hits != [self.pseudo_slot]:
            raise ValueError("pseudo_slot must mark the unique placeholder token")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def attention_mask(self) -> tuple[bool, ...]:
        return tuple(t != PAD for t in self.token_ids)

    @property
    def eos_index(self) -> int:
        """Summary position: the last non-padding token."""
        return max(i for i, t in enumerate(self.token_ids) if t != PAD)

    def padded(self, length: int) -> "TokenSequence":
        if len(self) > length:
            raise ValueError(f"sequence of {len(self)} tokens exceeds {length}")
        return TokenSequence(self.token_ids + (PAD,) * (length - len(self)), self.pseudo_slot)


def tokenize(text: str, max_tokens: int = 20) -> TokenSequence:
    """Lowercase, split on whitespace and wrap in BOS/EOS.

    Unknown words map to UNK; overlong input is cut so that EOS stays last.
    """
    ids = [BOS]
    for word in text.lower().split():
        if word == PLACEHOLDER:
            ids.append(PSEUDO)
        else:
            ids.append(WORD_TO_ID.get(word, UNK))
    ids = ids[: max_tokens - 1] + [EOS]
    hits = [i for i, t in enumerate(ids) if t == PSEUDO]
    if len(hits) > 1:
        raise ValueError("at most one placeholder per sequence")
    return TokenSequence(tuple(ids), hits[0] if hits else None)


def decode(tokens: TokenSequence) -> str:
    return " ".join(VOCAB[t] for t in tokens.token_ids if t not in (PAD, BOS, EOS))
