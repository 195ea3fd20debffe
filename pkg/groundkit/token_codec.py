"""Pixel boxes <-> discrete location tokens.

A coordinate is normalized to [0, bins] as (pixel / extent) * bins and
quantized; with the default 1000 the vocabulary has 1001 entries, <loc_0>
through <loc_1000>.
"""
from dataclasses import dataclass, field
from fractions import Fraction
from typing import List, Optional, Sequence, Tuple, Union
import logging
import math
import re

from groundkit.errors import CoordinateRangeError, TokenParseError, ValidationError
from groundkit.geometry import ImageDims, PixelBox

logger = logging.getLogger(__name__)

STRICT = "strict"
REPAIR = "repair"
POLICIES = (STRICT, REPAIR)
ROUNDING_MODES = ("half_away", "half_even", "floor")

LOC_TOKEN_RE = re.compile(r"^<loc_(0|[1-9][0-9]*)>$")
BARE_INT_RE = re.compile(r"^(0|[1-9][0-9]*)$")
# Location tags and the text between them, e.g. "nodule<loc_1><loc_2>..."
STREAM_RE = re.compile(r"<loc_[^>]*>|[^<\s]+|<[^>]*>?")


@dataclass(frozen=True)
class CodecConfig:
    bins: int = 1000
    rounding: str = "half_away"
    policy: str = REPAIR

    def __post_init__(self):
        if self.bins < 1:
            raise ValidationError(f"codec.bins must be positive, got {self.bins}")
        if self.rounding not in ROUNDING_MODES:
            raise ValidationError(f"codec.rounding must be one of {ROUNDING_MODES}, got {self.rounding!r}")
        if self.policy not in POLICIES:
            raise ValidationError(f"codec.policy must be one of {POLICIES}, got {self.policy!r}")


DEFAULT_CODEC = CodecConfig()


@dataclass(frozen=True)
class LocToken:
    bin: int

    @property
    def surface_form(self) -> str:
        return f"<loc_{self.bin}>"

    def __str__(self):
        return self.surface_form


@dataclass(frozen=True)
class TokenQuad:
    x0: LocToken
    y0: LocToken
    x1: LocToken
    y1: LocToken

    @classmethod
    def of(cls, x0: int, y0: int, x1: int, y1: int) -> "TokenQuad":
        return cls(LocToken(x0), LocToken(y0), LocToken(x1), LocToken(y1))

    @property
    def bins(self) -> Tuple[int, int, int, int]:
        return (self.x0.bin, self.y0.bin, self.x1.bin, self.y1.bin)

    @property
    def canonical(self) -> bool:
        return self.x0.bin <= self.x1.bin and self.y0.bin <= self.y1.bin

    def surface_forms(self) -> List[str]:
        return [t.surface_form for t in (self.x0, self.y0, self.x1, self.y1)]

    def __str__(self):
        return " ".join(self.surface_forms())


@dataclass(frozen=True)
class Diagnostic:
    code: str
    message: str
    position: Optional[int] = None

    def __str__(self):
        where = f" at token {self.position}" if self.position is not None else ""
        return f"{self.code}{where}: {self.message}"


@dataclass(frozen=True)
class DecodedBox:
    box: PixelBox
    repaired: bool = False


@dataclass
class ParseResult:
    boxes: List[PixelBox] = field(default_factory=list)
    diagnostics: List[Diagnostic] = field(default_factory=list)
    repaired: List[int] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.boxes)


def _quantize(value: Fraction, rounding: str) -> int:
    if rounding == "half_away":
        # value is never negative here
        return math.floor(value + Fraction(1, 2))
    if rounding == "half_even":
        return round(value)
    return math.floor(value)


def encode_coord(pixel: float, extent: int, codec: CodecConfig = DEFAULT_CODEC, name: str = "coordinate") -> LocToken:
    """Map a pixel coordinate on an axis of the given extent to its location token."""
    if extent < 1:
        raise CoordinateRangeError(f"{name}: extent must be positive, got {extent}")
    if math.isnan(pixel) or pixel < 0 or pixel > extent:
        raise CoordinateRangeError(f"{name}={pixel} is outside [0, {extent}]")
    # exact rational arithmetic so half-bin inputs round by the configured mode
    raw = Fraction(pixel) * codec.bins / extent
    return LocToken(min(codec.bins, max(0, _quantize(raw, codec.rounding))))


def encode_box(b: PixelBox, dims: ImageDims, codec: CodecConfig = DEFAULT_CODEC) -> TokenQuad:
    if b.x0 > b.x1 or b.y0 > b.y1:
        raise CoordinateRangeError(f"cannot encode inverted box {b.as_tuple()}")
    return TokenQuad(
        encode_coord(b.x0, dims.width, codec, "x0"),
        encode_coord(b.y0, dims.height, codec, "y0"),
        encode_coord(b.x1, dims.width, codec, "x1"),
        encode_coord(b.y1, dims.height, codec, "y1"),
    )


def _check_bin(token: LocToken, codec: CodecConfig):
    if token.bin < 0 or token.bin > codec.bins:
        raise TokenParseError(f"{token.surface_form} is outside [0, {codec.bins}]")


def decode_quad(q: TokenQuad, dims: ImageDims, codec: CodecConfig = DEFAULT_CODEC,
                policy: Optional[str] = None) -> DecodedBox:
    """Invert the normalization; inverted quads are rejected (strict) or swapped (repair)."""
    policy = policy or codec.policy
    for token in (q.x0, q.y0, q.x1, q.y1):
        _check_bin(token, codec)

    x0, y0, x1, y1 = q.bins
    repaired = False
    if not q.canonical:
        if policy == STRICT:
            raise TokenParseError(f"inverted quad {q}: expected x0<=x1 and y0<=y1")
        if x0 > x1:
            x0, x1 = x1, x0
        if y0 > y1:
            y0, y1 = y1, y0
        repaired = True

    box = PixelBox(
        x0 / codec.bins * dims.width,
        y0 / codec.bins * dims.height,
        x1 / codec.bins * dims.width,
        y1 / codec.bins * dims.height,
    )
    return DecodedBox(box, repaired)


def parse_token(text: Union[str, int], codec: CodecConfig = DEFAULT_CODEC) -> LocToken:
    """Parse '<loc_K>' (or a bare integer K, as text or int) into a LocToken."""
    if isinstance(text, int) and not isinstance(text, bool):
        text = str(text)
    if not isinstance(text, str):
        raise TokenParseError(f"not a location token: {text!r}")
    text = text.strip()
    match = LOC_TOKEN_RE.match(text) or BARE_INT_RE.match(text)
    if not match:
        raise TokenParseError(f"not a location token: {text!r}")
    token = LocToken(int(match.group(1)))
    _check_bin(token, codec)
    return token


def split_tokens(text: str) -> List[str]:
    """Split raw model output into location tags and interleaved text pieces."""
    return STREAM_RE.findall(text)


def format_tokens(quads: Sequence[TokenQuad]) -> str:
    return " ".join(str(q) for q in quads)


def parse_sequence(tokens: Sequence[Union[str, int]], dims: ImageDims, policy: Optional[str] = None,
                   codec: CodecConfig = DEFAULT_CODEC) -> ParseResult:
    """Group model-emitted tokens into boxes.

    Strict mode raises TokenParseError on the first anomaly. Repair mode skips
    bad tokens, swaps inverted quads and reports everything in diagnostics.
    """
    policy = policy or codec.policy
    if policy not in POLICIES:
        raise ValidationError(f"unknown decode policy {policy!r}")

    result = ParseResult()
    valid: List[LocToken] = []

    for position, text in enumerate(tokens):
        try:
            valid.append(parse_token(text, codec))
        except TokenParseError as e:
            if policy == STRICT:
                raise TokenParseError(f"token {position}: {e}")
            result.diagnostics.append(Diagnostic("invalid-token", str(e), position))

    if policy == STRICT and len(valid) % 4:
        raise TokenParseError(f"sequence length {len(valid)} is not a multiple of 4")

    for i in range(len(valid) // 4):
        quad = TokenQuad(*valid[4 * i:4 * i + 4])
        decoded = decode_quad(quad, dims, codec, policy)
        if decoded.repaired:
            result.repaired.append(i)
            result.diagnostics.append(Diagnostic("inverted-quad", f"swapped corners of {quad}", 4 * i))
        result.boxes.append(decoded.box)

    leftover = len(valid) % 4
    if leftover:
        noun = "token" if leftover == 1 else "tokens"
        result.diagnostics.append(Diagnostic("partial-quad", f"trailing partial quad ({leftover} {noun})"))

    for diagnostic in result.diagnostics:
        logger.debug("parse_sequence: %s", diagnostic)
    return result
