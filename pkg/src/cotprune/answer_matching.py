"""Final-answer extraction and exact-match comparison.

Normalization rules, applied in order and repeated until the text stops changing
(ruleset ``NORMALIZATION_VERSION``):

1. trim surrounding whitespace
2. strip one wrapper enclosing the whole text: ``\\boxed{..}``, ``\\(..\\)``,
   ``\\[..\\]``, ``$$..$$`` or ``$..$``
3. strip one trailing period
4. collapse internal whitespace runs to a single space
5. case-fold
6. rewrite simple integer fractions ``\\frac{a}{b}`` (also ``\\dfrac``/``\\tfrac``)
   and ``a / b`` as ``a/b``
7. drop thousands separators from pure integers (``1,234,567`` -> ``1234567``)

No symbolic equivalence is attempted: ``1/2`` and ``0.5`` do not match.
"""

from __future__ import annotations

import logging
import re
from enum import Enum

logger = logging.getLogger(__name__)

NORMALIZATION_VERSION = "norm-v1"

_MAX_NORMALIZE_PASSES = 16


class ExtractionMode(str, Enum):
    ON_POLICY_MARKER = "marker"
    BOXED = "boxed"
    AUTO = "auto"


_MARKER = re.compile(r"#{3}\s*Answer\s*:[ \t]*(.*)", re.IGNORECASE)
_BOXED_HEAD = re.compile(r"\\(?:boxed|fbox)\s*\{")
_STANDALONE = re.compile(
    r"""^[\s$]*(?:\\[(\[])?\s*
        (?P<ans>
            -?\d{1,3}(?:,\d{3})+(?:\.\d+)?      # 1,234 or 1,234.5
          | -?\d+(?:\.\d+)?(?:\s*/\s*\d+)?      # 12, 3.5, 7/8
          | -?\\[dt]?frac\{-?\d+\}\{\d+\}       # \frac{a}{b}
        )
        \s*(?:\\[)\]])?[\s$.]*$""",
    re.VERBOSE,
)


def _match_brace(text: str, open_idx: int) -> int | None:
    """Index of the ``}`` closing the ``{`` at ``open_idx``, or None."""
    depth = 0
    for i in range(open_idx, len(text)):
        ch = text[i]
        if ch == "\\" and i + 1 < len(text) and text[i + 1] in "{}":
            continue
        if ch == "{" and (i == 0 or text[i - 1] != "\\"):
            depth += 1
        elif ch == "}" and (i == 0 or text[i - 1] != "\\"):
            depth -= 1
            if depth == 0:
                return i
    return None


def _extract_boxed(text: str) -> str | None:
    last = None
    for m in _BOXED_HEAD.finditer(text):
        close = _match_brace(text, m.end() - 1)
        if close is not None:
            last = text[m.end():close]
    if last is None:
        return None
    return last.strip() or None


def _extract_marker(text: str) -> str | None:
    found = None
    for m in _MARKER.finditer(text):
        span = m.group(1).strip()
        if span:
            found = span
    return found


def _extract_standalone(text: str) -> str | None:
    for line in reversed(text.splitlines()):
        if not line.strip():
            continue
        m = _STANDALONE.match(line)
        if m:
            return m.group("ans").strip()
    return None


def extract_final_answer(completion: str, mode: ExtractionMode = ExtractionMode.AUTO) -> str | None:
    """Pull the final answer out of a model completion; the last occurrence wins."""
    mode = ExtractionMode(mode)
    if mode is ExtractionMode.ON_POLICY_MARKER:
        return _extract_marker(completion)
    if mode is ExtractionMode.BOXED:
        return _extract_boxed(completion)
    return (
        _extract_boxed(completion)
        or _extract_marker(completion)
        or _extract_standalone(completion)
    )


def extract_for_validation(completion: str) -> tuple[str | None, bool]:
    """Marker first, Auto as fallback. Returns ``(answer, used_fallback)``."""
    answer = _extract_marker(completion)
    if answer is not None:
        return answer, False
    answer = extract_final_answer(completion, ExtractionMode.AUTO)
    if answer is not None:
        logger.debug("validator ignored the answer marker; fell back to auto extraction")
    return answer, answer is not None


def _strip_wrapper(s: str) -> str:
    m = _BOXED_HEAD.match(s)
    if m:
        close = _match_brace(s, m.end() - 1)
        if close == len(s) - 1:
            return s[m.end():close]
        return s
    for left, right in (("\\(", "\\)"), ("\\[", "\\]"), ("$$", "$$"), ("$", "$")):
        if len(s) >= len(left) + len(right) and s.startswith(left) and s.endswith(right):
            return s[len(left):len(s) - len(right)]
    return s


_LATEX_FRAC = re.compile(r"^(-?)\\[dt]?frac\{\s*(-?\d+)\s*\}\{\s*(\d+)\s*\}$")
_PLAIN_FRAC = re.compile(r"^(-?\d+)\s*/\s*(\d+)$")
_THOUSANDS = re.compile(r"^-?\d{1,3}(?:(?:,|\{,\})\d{3})+$")


def _canonical_fraction(s: str) -> str:
    m = _LATEX_FRAC.match(s)
    if m:
        sign, num, den = m.groups()
        if sign and num.startswith("-"):
            num = num[1:]
            sign = ""
        return f"{sign}{num}/{den}"
    m = _PLAIN_FRAC.match(s)
    if m:
        return f"{m.group(1)}/{m.group(2)}"
    return s


def _normalize_once(s: str) -> str:
    s = s.strip()
    s = _strip_wrapper(s)
    if s.endswith("."):
        s = s[:-1]
    s = " ".join(s.split())
    s = s.casefold()
    s = _canonical_fraction(s)
    if _THOUSANDS.match(s):
        s = s.replace("{,}", "").replace(",", "")
    return s


def normalize_answer(text: str) -> str:
    """Apply the rule sequence to a fixed point, which makes it idempotent."""
    for _ in range(_MAX_NORMALIZE_PASSES):
        nxt = _normalize_once(text)
        if nxt == text:
            return nxt
        text = nxt
    return text


def answers_match(candidate: str | None, gold: str) -> bool:
    if not gold or not gold.strip():
        raise ValueError("gold answer must be non-empty")
    if candidate is None:
        return False
    return normalize_answer(candidate) == normalize_answer(gold)
