"""ECDSA over short-Weierstrass curves with a deliberately leaky multiplier.

The scalar multiplication is the classical left-to-right double-and-add:
one doubling per scalar bit below the leading 1, plus a conditional addition
on set bits.  scalar_mul_leaky returns the exact double (D) / double-and-add
(DA) operation sequence alongside the product, which is the side channel the
rest of the pipeline recovers.

Two built-in groups: NIST P-256 for realistic runs, and a 19-point toy curve
over GF(17) small enough for exhaustive brute-force oracles.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import NamedTuple, Optional

OP_DOUBLE = "D"
OP_DOUBLE_ADD = "DA"


class NonceRejectedError(ValueError):
    """The nonce produced r = 0 or s = 0; the caller must pick another."""


class KeyRecoveryError(ValueError):
    """Recovered key failed public-key verification; carries the candidate."""

    def __init__(self, message: str, candidate: Optional[int] = None):
        super().__init__(message)
        self.candidate = candidate


class Point(NamedTuple):
    """Affine curve point; (None, None) is the point at infinity."""

    x: Optional[int]
    y: Optional[int]

    @property
    def is_infinity(self) -> bool:
        return self.x is None


INFINITY = Point(None, None)


@dataclass(frozen=True)
class CurveParams:
    """y^2 = x^3 + ax + b over GF(p) with a prime-order generator G."""

    p: int
    a: int
    b: int
    gx: int
    gy: int
    n: int
    name: str

    def __post_init__(self):
        if not self.contains(self.gx, self.gy):
            raise ValueError(f"{self.name}: generator is not on the curve")
        if not scalar_mul(self.n, self.generator, self).is_infinity:
            raise ValueError(f"{self.name}: [n]G is not the point at infinity")

    def contains(self, x: int, y: int) -> bool:
        return (y * y - (x * x * x + self.a * x + self.b)) % self.p == 0

    @property
    def generator(self) -> Point:
        return Point(self.gx, self.gy)

    def on_curve(self, point: Point) -> bool:
        if point.is_infinity:
            return True
        return self.contains(point.x, point.y)


def point_add(p_pt: Point, q_pt: Point, curve: CurveParams) -> Point:
    """Group-law addition in affine coordinates."""
    if not curve.on_curve(p_pt) or not curve.on_curve(q_pt):
        raise ValueError("point_add: input not on curve")
    if p_pt.is_infinity:
        return q_pt
    if q_pt.is_infinity:
        return p_pt
    p = curve.p
    if p_pt.x == q_pt.x:
        if (p_pt.y + q_pt.y) % p == 0:
            return INFINITY
        num = (3 * p_pt.x * p_pt.x + curve.a) % p
        den = (2 * p_pt.y) % p
    else:
        num = (q_pt.y - p_pt.y) % p
        den = (q_pt.x - p_pt.x) % p
    lam = num * pow(den, -1, p) % p
    xr = (lam * lam - p_pt.x - q_pt.x) % p
    yr = (lam * (p_pt.x - xr) - p_pt.y) % p
    return Point(xr, yr)


def point_double(p_pt: Point, curve: CurveParams) -> Point:
    return point_add(p_pt, p_pt, curve)


def point_neg(p_pt: Point, curve: CurveParams) -> Point:
    if p_pt.is_infinity:
        return p_pt
    return Point(p_pt.x, (-p_pt.y) % curve.p)


def scalar_mul(k: int, p_pt: Point, curve: CurveParams) -> Point:
    """Plain double-and-add scalar multiplication, any k >= 0."""
    if k < 0:
        raise ValueError("scalar must be non-negative")
    acc = INFINITY
    addend = p_pt
    while k:
        if k & 1:
            acc = point_add(acc, addend, curve)
        addend = point_add(addend, addend, curve)
        k >>= 1
    return acc


def scalar_mul_leaky(k: int, curve: CurveParams) -> tuple[Point, list[str]]:
    """[k]G by left-to-right double-and-add, returning the D/DA sequence.

    The accumulator starts at G for the leading 1 bit, so the ops list holds
    one entry per remaining bit: D for a clear bit, DA for a set bit.
    """
    if not (0 < k < curve.n):
        raise ValueError(f"scalar must lie in [1, n-1], got {k}")
    acc = curve.generator
    ops: list[str] = []
    for bit in bin(k)[3:]:
        acc = point_add(acc, acc, curve)
        if bit == "1":
            acc = point_add(acc, curve.generator, curve)
            ops.append(OP_DOUBLE_ADD)
        else:
            ops.append(OP_DOUBLE)
    return acc, ops


@dataclass(frozen=True)
class KeyPair:
    """Private scalar alpha and its public point [alpha]G."""

    alpha: int
    public: Point

    @classmethod
    def generate(cls, curve: CurveParams, rng) -> "KeyPair":
        alpha = rng.randrange(1, curve.n)
        return cls.from_private(alpha, curve)

    @classmethod
    def from_private(cls, alpha: int, curve: CurveParams) -> "KeyPair":
        if not (0 < alpha < curve.n):
            raise ValueError("private key must lie in [1, n-1]")
        return cls(alpha=alpha, public=scalar_mul(alpha, curve.generator, curve))


@dataclass(frozen=True)
class Signature:
    """(m, r, s) triple plus the reduced message hash used to produce it."""

    message: bytes
    hash_value: int
    r: int
    s: int

    def __post_init__(self):
        if self.r <= 0 or self.s <= 0:
            raise ValueError("signature components must be positive")


def message_hash(message: bytes, curve: CurveParams) -> int:
    """SHA-256 of the message reduced mod the group order."""
    digest = hashlib.sha256(message).digest()
    return int.from_bytes(digest, "big") % curve.n


def sign(
    message: bytes,
    keypair: KeyPair,
    k: int,
    curve: CurveParams,
    hash_value: Optional[int] = None,
) -> Signature:
    """ECDSA signature with an explicit nonce.

    r = ([k]G).x mod n and s = k^-1 (h + alpha r) mod n.  A nonce producing
    r = 0 or s = 0 raises NonceRejectedError rather than silently redrawing,
    keeping signing a pure function.  ``hash_value`` overrides the SHA-256
    digest (used with toy curves where hashes are injected directly).
    """
    if not (0 < k < curve.n):
        raise ValueError(f"nonce must lie in [1, n-1], got {k}")
    h = message_hash(message, curve) if hash_value is None else hash_value % curve.n
    r_pt = scalar_mul(k, curve.generator, curve)
    if r_pt.is_infinity:
        raise NonceRejectedError("nonce maps to the point at infinity")
    r = r_pt.x % curve.n
    if r == 0:
        raise NonceRejectedError("nonce produced r = 0")
    s = pow(k, -1, curve.n) * (h + keypair.alpha * r) % curve.n
    if s == 0:
        raise NonceRejectedError("nonce produced s = 0")
    return Signature(message=message, hash_value=h, r=r, s=s)


def verify(sig: Signature, public: Point, curve: CurveParams) -> bool:
    """Standard ECDSA verification against the stored hash."""
    n = curve.n
    if not (0 < sig.r < n and 0 < sig.s < n):
        return False
    w = pow(sig.s, -1, n)
    u1 = sig.hash_value * w % n
    u2 = sig.r * w % n
    r_pt = point_add(
        scalar_mul(u1, curve.generator, curve), scalar_mul(u2, public, curve), curve
    )
    if r_pt.is_infinity:
        return False
    return r_pt.x % n == sig.r


def recover_nonce(ops: list[str]) -> int:
    """Rebuild the scalar from its D/DA sequence: leading 1, then DA=1, D=0."""
    k = 1
    for op in ops:
        if op == OP_DOUBLE_ADD:
            k = (k << 1) | 1
        elif op == OP_DOUBLE:
            k = k << 1
        else:
            raise ValueError(f"unknown operation {op!r}")
    return k


def recover_private_key(
    sig: Signature,
    k: int,
    curve: CurveParams,
    expected_public: Optional[Point] = None,
) -> int:
    """alpha = r^-1 (s k - h) mod n, from one signature and its nonce.

    When the expected public point is supplied, the candidate is verified
    and a mismatch raises KeyRecoveryError carrying the candidate; no wrong
    key is ever returned silently.
    """
    n = curve.n
    alpha = pow(sig.r, -1, n) * (sig.s * k - sig.hash_value) % n
    if expected_public is not None:
        if alpha == 0 or scalar_mul(alpha, curve.generator, curve) != expected_public:
            raise KeyRecoveryError(
                "recovered key does not match the public key", candidate=alpha
            )
    return alpha


# Toy curve over GF(17) with a 19-point group: small enough to enumerate
# every multiple of G when cross-checking the group law.
TOY17 = CurveParams(p=17, a=2, b=2, gx=5, gy=1, n=19, name="toy17")

P256 = CurveParams(
    p=0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF,
    a=-3 % 0xFFFFFFFF00000001000000000000000000000000FFFFFFFFFFFFFFFFFFFFFFFF,
    b=0x5AC635D8AA3A93E7B3EBBD55769886BC651D06B0CC53B0F63BCE3C3E27D2604B,
    gx=0x6B17D1F2E12C4247F8BCE6E563A440F277037D812DEB33A0F4A13945D898C296,
    gy=0x4FE342E2FE1A7F9B8EE7EB4A7C0F9E162BCE33576B315ECECBB6406837BF51F5,
    n=0xFFFFFFFF00000000FFFFFFFFFFFFFFFFBCE6FAADA7179E84F3B9CAC2FC632551,
    name="p256",
)

CURVES = {"toy17": TOY17, "p256": P256}


def format_signature(sig: Signature, curve: CurveParams) -> str:
    """r,s as base-10 for the toy curve, lowercase hex for P-256."""
    if curve.p.bit_length() <= 32:
        return f"{sig.r},{sig.s}"
    return f"{sig.r:x},{sig.s:x}"
