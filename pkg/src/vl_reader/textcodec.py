"""Character set, special tokens and string <-> token-sequence mapping."""

from typing import List, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import NonCharacterToken, OutOfCharset, TooLong
from .models import DEFAULT_CHARSET

EOS_ID = 0


class Charset(BaseModel):
    """Recognizable characters plus the four special tokens.

    Layout: EOS = 0, characters 1..n, then BOS, PAD, MASK_L.
    """

    model_config = ConfigDict(frozen=True)

    chars: str = DEFAULT_CHARSET
    max_label_len: int = Field(25, ge=1)

    @model_validator(mode="after")
    def validate_chars(self) -> "Charset":
        if not self.chars or len(set(self.chars)) != len(self.chars):
            raise ValueError("charset must be non-empty with distinct characters")
        return self

    @property
    def eos_id(self) -> int:
        return EOS_ID

    @property
    def bos_id(self) -> int:
        return len(self.chars) + 1

    @property
    def pad_id(self) -> int:
        return len(self.chars) + 2

    @property
    def mask_id(self) -> int:
        return len(self.chars) + 3

    @property
    def vocab_size(self) -> int:
        return len(self.chars) + 4

    @property
    def num_classes(self) -> int:
        """Output classes the decoder may emit: EOS and the characters."""
        return len(self.chars) + 1

    def char_id(self, char: str) -> int:
        return self.chars.index(char) + 1

    def is_char_id(self, token_id: int) -> bool:
        return 1 <= token_id <= len(self.chars)

    def to_line(self) -> str:
        """Serialize as the one-line config value."""
        return self.chars

    @classmethod
    def from_line(cls, line: str, max_label_len: int = 25) -> "Charset":
        return cls(chars=line.strip(), max_label_len=max_label_len)


class TokenSeq(BaseModel):
    """A label as character ids with per-position linguistic-mask flags."""

    model_config = ConfigDict(frozen=True)

    ids: List[int] = Field(default_factory=list)
    masked: List[bool] = Field(default_factory=list)

    @model_validator(mode="after")
    def validate_masked(self) -> "TokenSeq":
        if len(self.masked) != len(self.ids):
            raise ValueError("masked flags must match ids in length")
        if any(flag and token == EOS_ID for token, flag in zip(self.ids, self.masked)):
            raise ValueError("EOS positions cannot be masked")
        return self

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def masked_positions(self) -> List[int]:
        """Context columns (1-based) of the masked characters."""
        return [i + 1 for i, flag in enumerate(self.masked) if flag]

    def with_mask(self, positions: Sequence[int]) -> "TokenSeq":
        """Copy with the given 0-based positions flagged."""
        chosen = set(positions)
        return TokenSeq(ids=list(self.ids), masked=[i in chosen for i in range(len(self.ids))])


def encode(text: str, charset: Charset) -> TokenSeq:
    """Map a string to character ids; text is lowercased first."""
    text = text.lower()
    if len(text) > charset.max_label_len:
        raise TooLong(len(text), charset.max_label_len)
    ids = []
    for index, char in enumerate(text):
        if char not in charset.chars:
            raise OutOfCharset(char, index)
        ids.append(charset.char_id(char))
    return TokenSeq(ids=ids, masked=[False] * len(ids))


def decode(ids: Sequence[int], charset: Charset) -> str:
    """Map ids back to a string, truncating at the first EOS."""
    chars = []
    for index, token_id in enumerate(ids):
        token_id = int(token_id)
        if token_id == EOS_ID:
            break
        if not charset.is_char_id(token_id):
            raise NonCharacterToken(token_id, index)
        chars.append(charset.chars[token_id - 1])
    return "".join(chars)
