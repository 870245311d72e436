"""Closed word-level vocabulary, caption templates, and token spans.

A fixed 64-word vocabulary keeps tokenization exact and reversible:
detokenize(tokenize(s)) reproduces s for any in-vocabulary string.
Matching is case-insensitive; each token has one canonical surface form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, PairingContractError, VocabularyError

REFERENCE_PREFIX = ("This", "is", "an", "image", "with")

DEFECT_KINDS = ("scratch", "spot", "crack", "contamination")
TEXTURE_KINDS = ("stripes", "checker", "noise", "cellular")

WORDS: tuple[str, ...] = (
    "<pad>",
    *REFERENCE_PREFIX,
    *TEXTURE_KINDS,
    *DEFECT_KINDS,
    "surface", "clean",
    "dark", "bright", "deep", "thin", "small", "large", "fine", "rough",
    "a", "the", "on", "of", "one", "two",
    "metal", "fabric", "wood", "tile", "plate", "panel",
    "mark", "stain", "line", "dot", "blemish", "flaw",
    "defect", "damage", "pattern", "region", "area", "edge",
    "center", "top", "bottom", "left", "right", "near",
    "long", "short", "wide", "narrow", "faint", "sharp",
    "red", "blue", "gray", "light",
)

assert len(WORDS) == 64 and len(set(w.lower() for w in WORDS)) == 64

PAD_ID = 0

_ID_BY_LOWER = {w.lower(): i for i, w in enumerate(WORDS)}


def vocab_size() -> int:
    return len(WORDS)


def tokenize(text: str) -> np.ndarray:
    ids = []
    for word in text.split():
        wid = _ID_BY_LOWER.get(word.lower())
        if wid is None:
            raise VocabularyError(f"word {word!r} not in the closed vocabulary")
        ids.append(wid)
    return np.asarray(ids, dtype=np.int64)


def detokenize(ids) -> str:
    return " ".join(WORDS[int(i)] for i in ids)


@dataclass(frozen=True)
class TokenSpan:
    """Keyword block inside a reference caption: tokens prefix_len+1 .. total_len
    in 1-based counting, i.e. 0-based rows [prefix_len, total_len)."""

    prefix_len: int
    total_len: int

    def __post_init__(self):
        if not (0 < self.prefix_len < self.total_len):
            raise ContractError(
                f"invalid token span: prefix {self.prefix_len}, total {self.total_len}"
            )

    @property
    def length(self) -> int:
        return self.total_len - self.prefix_len

    def rows(self) -> np.ndarray:
        return np.arange(self.prefix_len, self.total_len, dtype=np.int64)


def reference_caption(keyword: str) -> tuple[np.ndarray, TokenSpan]:
    """Tokenized 'This is an image with <keyword>' plus the keyword span."""
    kw_ids = tokenize(keyword)
    if kw_ids.size == 0:
        raise VocabularyError("empty anomaly keyword")
    prefix_ids = tokenize(" ".join(REFERENCE_PREFIX))
    ids = np.concatenate([prefix_ids, kw_ids])
    return ids, TokenSpan(prefix_len=len(prefix_ids), total_len=len(ids))


def targeted_caption(texture: str | None, keyword: str | None,
                     position: str | None = None) -> np.ndarray:
    """Targeted text: '<texture> surface with <keyword> [near <position>]'
    for anomalies, 'clean <texture> surface' for normal requests."""
    if keyword is None:
        if texture is None:
            raise VocabularyError("targeted caption needs a texture or a keyword")
        return tokenize(f"clean {texture} surface")
    body = f"surface with {keyword}" if texture is None else f"{texture} surface with {keyword}"
    if position:
        body += f" near {position}"
    return tokenize(body)


def grid_position_phrase(cy: float, cx: float, size: int) -> str:
    """Coarse 3x3 location word(s) for a mask centroid."""
    row = min(int(3 * cy / size), 2)
    col = min(int(3 * cx / size), 2)
    vert = ("top", "", "bottom")[row]
    horz = ("left", "", "right")[col]
    phrase = f"{vert} {horz}".strip()
    return phrase if phrase else "center"


def strip_position(text: str) -> str:
    """Remove a trailing 'near <position>' clause from a targeted caption."""
    words = text.split()
    if "near" in words:
        return " ".join(words[: words.index("near")])
    return text


def anomaly_type(keyword: str) -> str:
    """Canonical defect kind named by a (possibly multi-word) keyword."""
    kinds = [w.lower() for w in keyword.split() if w.lower() in DEFECT_KINDS]
    if len(kinds) != 1:
        raise VocabularyError(f"keyword {keyword!r} does not name exactly one defect kind")
    return kinds[0]


def check_same_anomaly_type(keyword: str, target_keyword: str) -> str:
    ka, kt = anomaly_type(keyword), anomaly_type(target_keyword)
    if ka != kt:
        raise PairingContractError(
            f"reference keyword {keyword!r} names {ka!r} but target names {kt!r}"
        )
    return ka


def pad_to(ids: np.ndarray, length: int) -> np.ndarray:
    if len(ids) > length:
        raise ContractError(f"token sequence length {len(ids)} exceeds pad length {length}")
    out = np.full(length, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out
