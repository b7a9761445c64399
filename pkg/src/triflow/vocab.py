"""Token vocabulary for the toy world.

Exactly V=512 ids, dense in [0, V): six functional special tokens first
(<boi>/<eoi> image delimiters, <bop>/<eop> plan delimiters, <boh>/<eoh>
heatmap/mask-summary delimiters), then the 50-word lexicon, then 101
coordinate-bin tokens @0..@100 (box coordinates quantized to 1/100), then
reserved fillers <r0>.. to pad the table. Tokenization is whitespace split
with a strict lexicon: unknown words raise instead of mapping to an UNK.
"""

from __future__ import annotations

from .errors import UnknownWordError

SPECIAL_TOKENS = ["<boi>", "<eoi>", "<bop>", "<eop>", "<boh>", "<eoh>"]

LEXICON = [
    ".", ",", ";", "?",
    "a", "and", "the", "of", "in", "on", "is",
    "black", "background", "cell",
    "red", "green", "blue", "yellow", "cyan", "magenta", "white", "orange",
    "circle", "square", "triangle", "circles", "squares", "triangles",
    "small", "large",
    "top", "upper", "lower", "bottom",
    "left", "midleft", "midright", "right",
    "above", "below",
    "one", "two", "three",
    "what", "color", "shape", "how", "many", "objects", "object",
]

COORD_BINS = 101  # @0 .. @100
VOCAB_SIZE = 512
FORMAT_NAME = "triflow-vocab"
FORMAT_VERSION = 1


class Vocabulary:
    """Bidirectional word<->id map with flagged special tokens."""

    def __init__(self, tokens: list[str], n_special: int):
        if len(tokens) != len(set(tokens)):
            raise ValueError("vocabulary tokens must be unique")
        self.tokens = list(tokens)
        self.n_special = n_special
        self.ids = {tok: i for i, tok in enumerate(self.tokens)}

    # ---- construction ----

    @classmethod
    def default(cls) -> "Vocabulary":
        tokens = list(SPECIAL_TOKENS) + list(LEXICON)
        tokens += [f"@{b}" for b in range(COORD_BINS)]
        tokens += [f"<r{i}>" for i in range(VOCAB_SIZE - len(tokens))]
        return cls(tokens, n_special=len(SPECIAL_TOKENS))

    # ---- lookups ----

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.ids[token]
        except KeyError:
            raise UnknownWordError(f"unknown word {token!r}") from None

    def token(self, i: int) -> str:
        return self.tokens[i]

    def is_special(self, i: int) -> bool:
        return i < self.n_special

    @property
    def boi(self) -> int:
        return self.ids["<boi>"]

    @property
    def eoi(self) -> int:
        return self.ids["<eoi>"]

    @property
    def bop(self) -> int:
        return self.ids["<bop>"]

    @property
    def eop(self) -> int:
        return self.ids["<eop>"]

    @property
    def boh(self) -> int:
        return self.ids["<boh>"]

    @property
    def eoh(self) -> int:
        return self.ids["<eoh>"]

    @property
    def special_ids(self) -> list[int]:
        return [self.boi, self.eoi, self.bop, self.eop, self.boh, self.eoh]

    def coord_id(self, bin_index: int) -> int:
        """Id of coordinate-bin token @bin_index, bin_index in [0, 100]."""
        if not 0 <= bin_index < COORD_BINS:
            raise ValueError(f"coordinate bin {bin_index} outside [0, {COORD_BINS - 1}]")
        return self.ids[f"@{bin_index}"]

    def coord_bin(self, token_id: int) -> int | None:
        """Inverse of coord_id; None when the id is not a coordinate bin."""
        tok = self.tokens[token_id]
        if tok.startswith("@") and tok[1:].isdigit():
            return int(tok[1:])
        return None

    # ---- serialization: versioned text, one token per line, specials flagged ----

    def save(self, path) -> None:
        lines = [f"{FORMAT_NAME} {FORMAT_VERSION} {len(self.tokens)} {self.n_special}"]
        for i, tok in enumerate(self.tokens):
            flag = "special" if i < self.n_special else "word"
            lines.append(f"{tok}\t{flag}")
        with open(path, "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
        head = lines[0].split()
        if len(head) != 4 or head[0] != FORMAT_NAME:
            raise ValueError(f"not a vocabulary file: header {lines[0]!r}")
        if int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"unsupported vocabulary version {head[1]}")
        count, n_special = int(head[2]), int(head[3])
        tokens = []
        for line in lines[1:count + 1]:
            tok, flag = line.split("\t")
            tokens.append(tok)
            if flag not in ("special", "word"):
                raise ValueError(f"bad flag {flag!r} in vocabulary file")
        if len(tokens) != count:
            raise ValueError(f"vocabulary file lists {len(tokens)} of {count} tokens")
        return cls(tokens, n_special)


def tokenize(text: str, vocab: Vocabulary) -> list[int]:
    """Whitespace tokenization against the strict lexicon."""
    return [vocab.id(word) for word in text.split()]


def detokenize(ids, vocab: Vocabulary) -> str:
    """Inverse of tokenize: ids joined by single spaces."""
    return " ".join(vocab.token(i) for i in ids)
