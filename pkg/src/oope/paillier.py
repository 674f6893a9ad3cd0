"""Paillier additively homomorphic encryption.

The generator is pinned to g = 1+N, which turns the usual g^m
exponentiation into one modular multiplication, since
(1+N)^m = 1+mN (mod N^2).  Decryption runs over the CRT factors P^2
and Q^2; the textbook single-exponentiation path is kept as a
cross-check oracle.  Encryption can draw pre-generated r^N values from
a RandomnessPool, which moves the expensive exponentiation out of the
protocol's hot path.
"""

import hashlib
import math
import threading
from collections import deque
from dataclasses import dataclass

from .errors import (ConfigurationError, DomainError, KeyMismatchError,
                     PrimeGenerationError)
from .rng import make_rng
from .wire import be_bytes, fixed_bytes, lp, read_bytes, read_int, read_lp

STANDARD_KEY_BITS = (1024, 2048, 3072, 4096)
MIN_TEST_KEY_BITS = 64
MR_ROUNDS = 40  # per-round error <= 1/4, total <= 2^-80
KEY_ID_BYTES = 32


def _sieve(limit):
    flags = bytearray([1]) * limit
    flags[0] = flags[1] = 0
    for i in range(2, int(limit ** 0.5) + 1):
        if flags[i]:
            flags[i * i::i] = bytearray(len(flags[i * i::i]))
    return [i for i, f in enumerate(flags) if f]


_SMALL_PRIMES = _sieve(2000)


def is_probable_prime(n: int, rng=None) -> bool:
    """Miller-Rabin with error probability at most 2^-80."""
    if n < 2:
        return False
    for p in _SMALL_PRIMES:
        if n == p:
            return True
        if n % p == 0:
            return False
    rng = rng or make_rng()
    d = n - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(MR_ROUNDS):
        a = rng.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(s - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def _gen_prime(bits: int, rng) -> int:
    # Top two bits forced so the product of two such primes has exactly
    # 2*bits bits.
    for _ in range(80 * bits):
        cand = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        if is_probable_prime(cand, rng):
            return cand
    raise PrimeGenerationError(f"no {bits}-bit prime found within retry budget")


class PaillierPublicKey:
    """Public key (N, g=1+N); key_id is the SHA-256 of N."""

    def __init__(self, n: int, key_bits: int):
        self.n = n
        self.key_bits = key_bits
        self.n_sq = n * n
        self.key_id = hashlib.sha256(be_bytes(n)).digest()

    def __eq__(self, other):
        return isinstance(other, PaillierPublicKey) and self.n == other.n

    def __hash__(self):
        return hash(self.n)

    def __repr__(self):
        return f"PaillierPublicKey({self.key_bits} bits, id={self.key_id.hex()[:8]})"


class PaillierPrivateKey:
    """Private key with precomputed CRT decryption constants."""

    def __init__(self, p: int, q: int, public: PaillierPublicKey):
        self.p = p
        self.q = q
        self.public = public
        n = public.n
        self.lam = (p - 1) * (q - 1) // math.gcd(p - 1, q - 1)
        self.mu = pow(self.lam % n, -1, n)  # L((1+N)^lam mod N^2) = lam mod N
        self.p_sq = p * p
        self.q_sq = q * q
        self.p_inv_q = pow(p, -1, q)
        self.hp = pow(self._crt_l(1 + (p - 1) * n % self.p_sq, p), -1, p)
        self.hq = pow(self._crt_l(1 + (q - 1) * n % self.q_sq, q), -1, q)

    @staticmethod
    def _crt_l(u, r):
        return ((u - 1) % (r * r)) // r


@dataclass(frozen=True)
class HomCiphertext:
    """A Paillier ciphertext: residue mod N^2 plus the owning key's id."""

    value: int
    key_id: bytes


class RandomnessPool:
    """Queue of precomputed r^N mod N^2 values, each consumed once.

    Consumption is internally synchronized; when the pool runs dry the
    caller falls back to on-demand generation unless allow_fallback is
    False, in which case encryption raises ConfigurationError.
    """

    def __init__(self, pk: PaillierPublicKey, allow_fallback: bool = True):
        self.pk = pk
        self.allow_fallback = allow_fallback
        self._values = deque()
        self._lock = threading.Lock()

    def fill(self, count: int, rng=None):
        rng = rng or make_rng()
        vals = [pow(_fresh_r(self.pk, rng), self.pk.n, self.pk.n_sq)
                for _ in range(count)]
        with self._lock:
            self._values.extend(vals)

    def take(self):
        with self._lock:
            return self._values.popleft() if self._values else None

    def __len__(self):
        with self._lock:
            return len(self._values)


def _fresh_r(pk, rng):
    while True:
        r = rng.randrange(1, pk.n)
        if math.gcd(r, pk.n) == 1:
            return r


def keygen(key_bits: int, rng=None, allow_small: bool = False):
    """Generate a key pair; decrypt(encrypt(m)) == m for m in [0, N).

    key_bits outside the standard set is refused unless allow_small is
    given (test builds only).
    """
    if key_bits not in STANDARD_KEY_BITS:
        if not allow_small or key_bits < MIN_TEST_KEY_BITS or key_bits % 2:
            raise DomainError(f"unsupported key size {key_bits}")
    rng = rng or make_rng()
    half = key_bits // 2
    while True:
        p = _gen_prime(half, rng)
        q = _gen_prime(half, rng)
        if p != q:
            break
    pk = PaillierPublicKey(p * q, key_bits)
    return pk, PaillierPrivateKey(p, q, pk)


def encrypt(pk: PaillierPublicKey, m: int, rng=None,
            pool: RandomnessPool = None) -> HomCiphertext:
    """Encrypt m in [0, N) as (1+mN) * r^N mod N^2."""
    if not 0 <= m < pk.n:
        raise DomainError(f"plaintext out of range [0, N)")
    rn = None
    if pool is not None:
        rn = pool.take()
        if rn is None and not pool.allow_fallback:
            raise ConfigurationError("randomness pool exhausted")
    if rn is None:
        rn = pow(_fresh_r(pk, rng or make_rng()), pk.n, pk.n_sq)
    value = (1 + m * pk.n) % pk.n_sq * rn % pk.n_sq
    return HomCiphertext(value, pk.key_id)


def decrypt(sk: PaillierPrivateKey, c: HomCiphertext) -> int:
    """CRT decryption; agrees with decrypt_direct on every ciphertext."""
    _check_key(sk.public, c)
    mp = sk._crt_l(pow(c.value % sk.p_sq, sk.p - 1, sk.p_sq), sk.p) * sk.hp % sk.p
    mq = sk._crt_l(pow(c.value % sk.q_sq, sk.q - 1, sk.q_sq), sk.q) * sk.hq % sk.q
    return mp + sk.p * ((mq - mp) * sk.p_inv_q % sk.q)


def decrypt_direct(sk: PaillierPrivateKey, c: HomCiphertext) -> int:
    """Textbook path: m = L(c^lam mod N^2) * mu mod N."""
    _check_key(sk.public, c)
    n = sk.public.n
    u = pow(c.value, sk.lam, sk.public.n_sq)
    return (u - 1) // n * sk.mu % n


def hom_add(pk: PaillierPublicKey, c1: HomCiphertext,
            c2: HomCiphertext) -> HomCiphertext:
    """Ciphertext of (m1 + m2) mod N."""
    _check_key(pk, c1)
    _check_key(pk, c2)
    return HomCiphertext(c1.value * c2.value % pk.n_sq, pk.key_id)


def hom_scale(pk: PaillierPublicKey, c: HomCiphertext, s: int) -> HomCiphertext:
    """Ciphertext of (m * s) mod N for 0 < s < N."""
    _check_key(pk, c)
    if not 0 < s < pk.n:
        raise DomainError("scalar must lie in (0, N)")
    return HomCiphertext(pow(c.value, s, pk.n_sq), pk.key_id)


def hom_sub(pk: PaillierPublicKey, c1: HomCiphertext,
            c2: HomCiphertext) -> HomCiphertext:
    """Ciphertext of (m1 - m2) mod N, via c1 * c2^(N-1)."""
    return hom_add(pk, c1, hom_scale(pk, c2, pk.n - 1))


def _check_key(pk, c):
    if c.key_id != pk.key_id:
        raise KeyMismatchError("ciphertext belongs to a different key")


# --- serialization ---------------------------------------------------------

def serialize_ciphertext(c: HomCiphertext) -> bytes:
    """Length-prefixed minimal big-endian residue followed by the key id."""
    return lp(be_bytes(c.value)) + c.key_id


def parse_ciphertext(buf: bytes, off: int = 0):
    blob, off = read_lp(buf, off)
    key_id, off = read_bytes(buf, off, KEY_ID_BYTES)
    return HomCiphertext(int.from_bytes(blob, "big"), key_id), off


def cipher_width(key_bits: int) -> int:
    """Fixed record width of a residue mod N^2, in bytes."""
    return 2 * key_bits // 8


def cipher_record(c: HomCiphertext, key_bits: int) -> bytes:
    """Fixed-width residue record used inside frames and table files."""
    return lp(fixed_bytes(c.value, cipher_width(key_bits)))


def parse_cipher_record(buf: bytes, off: int, key_id: bytes):
    blob, off = read_lp(buf, off)
    return HomCiphertext(int.from_bytes(blob, "big"), key_id), off


def serialize_public_key(pk: PaillierPublicKey) -> bytes:
    return fixed_bytes(pk.key_bits, 2) + lp(be_bytes(pk.n))


def parse_public_key(buf: bytes, off: int = 0):
    key_bits, off = read_int(buf, off, 2)
    blob, off = read_lp(buf, off)
    return PaillierPublicKey(int.from_bytes(blob, "big"), key_bits), off


def serialize_private_key(sk: PaillierPrivateKey) -> bytes:
    return (fixed_bytes(sk.public.key_bits, 2)
            + lp(be_bytes(sk.p)) + lp(be_bytes(sk.q)))


def parse_private_key(buf: bytes, off: int = 0):
    key_bits, off = read_int(buf, off, 2)
    pb, off = read_lp(buf, off)
    qb, off = read_lp(buf, off)
    p = int.from_bytes(pb, "big")
    q = int.from_bytes(qb, "big")
    pk = PaillierPublicKey(p * q, key_bits)
    return PaillierPrivateKey(p, q, pk), off
