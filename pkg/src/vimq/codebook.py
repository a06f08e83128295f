"""Additive power-of-two codebooks for 4-bit (and sibling) weight quantization.

A codebook is the set of nonnegative levels {c + f} where c ranges over
{0} u {2^-k : k in coarse exponents} and f over {0} u {2^-k : k in fine
exponents}. Every level is therefore the sum of at most two power-of-two
terms, so multiplying by a level reduces to at most two shifts and one add.
A stored weight is a sign bit plus a magnitude index into the level table.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ShiftPair = tuple[int | None, int | None]


@dataclass(frozen=True)
class ApotCodebook:
    levels: tuple[float, ...]  # ascending, levels[0] == 0.0, all exact dyadics
    shift_pairs: tuple[ShiftPair, ...]  # (coarse k, fine k) per level, None = absent term
    magnitude_bits: int  # 2**magnitude_bits == len(levels)

    @property
    def code_bits(self) -> int:
        return self.magnitude_bits + 1  # plus sign

    @property
    def max_level(self) -> float:
        return self.levels[-1]

    @property
    def max_exponent(self) -> int:
        ks = [k for pair in self.shift_pairs for k in pair if k is not None]
        return max(ks) if ks else 0

    def levels_int(self, preshift: int) -> np.ndarray:
        """Level values scaled by 2**preshift, as exact int32 (requires preshift >= max k)."""
        if preshift < self.max_exponent:
            raise ValueError(
                f"preshift {preshift} below max basis exponent {self.max_exponent}"
            )
        vals = [shift_add(1, pair, preshift) for pair in self.shift_pairs]
        return np.asarray(vals, dtype=np.int32)

    def levels_f32(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float32)


def shift_add(x: int, pair: ShiftPair, preshift: int) -> int:
    """Exact x * level * 2**preshift via the level's shift decomposition."""
    kc, kf = pair
    total = 0
    if kc is not None:
        total += x << (preshift - kc)
    if kf is not None:
        total += x << (preshift - kf)
    return total


def build_codebook(
    coarse_exponents: tuple[int, ...], fine_exponents: tuple[int, ...]
) -> ApotCodebook:
    """Build the level table from basis exponent sets; rejects colliding levels."""
    for k in tuple(coarse_exponents) + tuple(fine_exponents):
        if not isinstance(k, int) or k < 0:
            raise ValueError(f"basis exponents must be integers >= 0, got {k!r}")
    coarse: list[tuple[float, int | None]] = [(0.0, None)]
    coarse += [(2.0**-k, k) for k in sorted(set(coarse_exponents))]
    fine: list[tuple[float, int | None]] = [(0.0, None)]
    fine += [(2.0**-k, k) for k in sorted(set(fine_exponents))]
    table: dict[float, ShiftPair] = {}
    for c, kc in coarse:
        for f, kf in fine:
            lvl = c + f  # dyadic, exact in f64
            if lvl in table:
                raise ValueError(f"duplicate level {lvl} from basis collision")
            table[lvl] = (kc, kf)
    levels = sorted(table)
    if levels[-1] > 1.0:
        raise ValueError(f"max level {levels[-1]} exceeds 1 (normalized weights)")
    n = len(levels)
    if n & (n - 1):
        raise ValueError(f"level count {n} is not a power of two")
    return ApotCodebook(
        levels=tuple(levels),
        shift_pairs=tuple(table[lvl] for lvl in levels),
        magnitude_bits=n.bit_length() - 1,
    )


# Default basis sets per total weight width (sign + magnitude bits). The 4-bit
# entry is the scheme's native codebook; 3/5-bit are sweep defaults and can be
# overridden in config. The defaults are nested (3-bit drops the fine term,
# 5-bit adds finer ones) so each level set contains the next narrower one and
# per-element rounding error can only shrink as width grows.
DEFAULT_BASES: dict[int, tuple[tuple[int, ...], tuple[int, ...]]] = {
    3: ((1, 2, 4), ()),
    4: ((1, 2, 4), (3,)),
    5: ((1, 2, 4), (3, 5, 6)),
}


def default_codebook(bits: int = 4) -> ApotCodebook:
    if bits not in DEFAULT_BASES:
        raise ValueError(f"no default basis for {bits}-bit codes")
    return build_codebook(*DEFAULT_BASES[bits])
