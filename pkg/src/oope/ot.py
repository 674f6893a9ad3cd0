"""1-out-of-2 oblivious transfer for the comparison circuits.

Two layers:

* A semi-honest base OT over a multiplicative prime group.  The
  receiver publishes one real public key and one element sampled by
  hashing into the quadratic-residue subgroup, so it provably does not
  know the second discrete log even given its full internal state.
* An IKNP-style extension that turns 128 base OTs into an arbitrarily
  large pool of random OTs using only hashing, consumed per transfer
  through XOR derandomization.  Base seeds are reused across batches
  with a per-batch nonce, which is fine against passive adversaries.

Every protocol message is one bytes blob pushed through caller-supplied
send/recv callables, so the same code runs over in-memory pipes and
framed TCP channels.
"""

import hashlib

import numpy as np

from .errors import ProtocolError
from .garbling import LABEL_BYTES
from .rng import make_rng
from .wire import be_bytes, u32, xor_bytes

KAPPA = 128  # extension security parameter = base OT count
EXPONENT_BITS = 256
SEED_BYTES = 32
DEFAULT_BATCH = 2048

# RFC 3526 group 15 (3072-bit MODP); >= 128-bit strength.
_P_3072 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A637ED6B0BFF5CB6F406B7ED"
    "EE386BFB5A899FA5AE9F24117C4B1FE649286651ECE45B3DC2007CB8A163BF05"
    "98DA48361C55D39A69163FA8FD24CF5F83655D23DCA3AD961C62F356208552BB"
    "9ED529077096966D670C354E4ABC9804F1746C08CA18217C32905E462E36CE3B"
    "E39E772C180E86039B2783A2EC07A28FB5C55DF06F4C52C9DE2BCBF695581718"
    "3995497CEA956AE515D2261898FA051015728E5A8AAAC42DAD33170D04507A33"
    "A85521ABDF1CBA64ECFB850458DBEF0A8AEA71575D060C7DB3970F85A6E1E4C7"
    "ABF5AE8CDB0933D71E8C94E04A25619DCEE3D2261AD2EE6BF12FFA06D98A0864"
    "D87602733EC86A64521F2B18177B200CBBE117577A615D6C770988C0BAD946E2"
    "08E24FA074E5AB3143DB5BFCE0FD108E4B82D120A93AD2CAFFFFFFFFFFFFFFFF",
    16)

# RFC 2409 First Oakley Group (768-bit).  Test profile only: far below
# the 128-bit requirement, kept to make unit tests fast.
_P_768 = int(
    "FFFFFFFFFFFFFFFFC90FDAA22168C234C4C6628B80DC1CD129024E088A67CC74"
    "020BBEA63B139B22514A08798E3404DDEF9519B3CD3A431B302B0A6DF25F1437"
    "4FE1356D6D51C245E485B576625E7EC6F44C42E9A63A3620FFFFFFFFFFFFFFFF",
    16)


class OtGroup:
    """Safe-prime group; generator 4 spans the quadratic residues."""

    def __init__(self, p: int):
        self.p = p
        self.g = 4
        self.width = (p.bit_length() + 7) // 8

    def exp(self, base, e):
        return pow(base, e, self.p)

    def hash_to_member(self, seed: bytes) -> int:
        # Squaring lands in the QR subgroup; the discrete log of the
        # result is unknown even to whoever sampled the seed.
        digest = b"".join(hashlib.sha256(seed + u32(i)).digest()
                          for i in range(self.width // 32 + 1))
        t = int.from_bytes(digest, "big") % self.p
        return t * t % self.p

    def check_member(self, v: int):
        if not 2 <= v < self.p:
            raise ProtocolError("malformed group element")


GROUP_DEFAULT = OtGroup(_P_3072)
GROUP_TEST = OtGroup(_P_768)


def _kdf(key: int, index: int, branch: int) -> bytes:
    return hashlib.sha256(be_bytes(key) + u32(index) + bytes([branch])).digest()


def base_ot_send(send, recv, messages, group=GROUP_DEFAULT, rng=None):
    """Transfer one 32-byte message of each (m0, m1) pair obliviously."""
    rng = rng or make_rng()
    count = len(messages)
    blob = recv()
    if len(blob) != 2 * count * group.width:
        raise ProtocolError("base OT public key blob has wrong size")
    pks = [int.from_bytes(blob[i * group.width:(i + 1) * group.width], "big")
           for i in range(2 * count)]
    r = rng.getrandbits(EXPONENT_BITS)
    out = [group.exp(group.g, r).to_bytes(group.width, "big")]
    for i, (m0, m1) in enumerate(messages):
        for b, m in ((0, m0), (1, m1)):
            pk = pks[2 * i + b]
            group.check_member(pk)
            out.append(xor_bytes(m, _kdf(group.exp(pk, r), i, b)))
    send(b"".join(out))


def base_ot_recv(send, recv, choice_bits, group=GROUP_DEFAULT, rng=None):
    """Receive the chosen message per bit; learns nothing of the others."""
    rng = rng or make_rng()
    secrets = []
    pks = []
    for c in choice_bits:
        k = rng.getrandbits(EXPONENT_BITS)
        real = group.exp(group.g, k)
        dummy = group.hash_to_member(rng.getrandbits(256).to_bytes(32, "big"))
        secrets.append(k)
        pks.extend([real, dummy] if c == 0 else [dummy, real])
    send(b"".join(pk.to_bytes(group.width, "big") for pk in pks))
    blob = recv()
    if len(blob) != group.width + 2 * len(choice_bits) * SEED_BYTES:
        raise ProtocolError("base OT ciphertext blob has wrong size")
    gr = int.from_bytes(blob[:group.width], "big")
    group.check_member(gr)
    out = []
    for i, (c, k) in enumerate(zip(choice_bits, secrets)):
        start = group.width + (2 * i + c) * SEED_BYTES
        out.append(xor_bytes(blob[start:start + SEED_BYTES],
                             _kdf(group.exp(gr, k), i, c)))
    return out


def _prg(seed: bytes, nbytes: int, batch: int) -> bytes:
    blocks = [hashlib.sha256(seed + b"prg" + u32(batch) + u32(i)).digest()
              for i in range((nbytes + 31) // 32)]
    return b"".join(blocks)[:nbytes]


def _row_hash(batch: int, j: int, row: bytes) -> bytes:
    return hashlib.sha256(b"iknp" + u32(batch) + u32(j) + row).digest()[:LABEL_BYTES]


def _transpose_bits(columns, m):
    """KAPPA columns of m bits -> m rows of KAPPA bits (16 bytes each)."""
    mat = np.frombuffer(b"".join(columns), dtype=np.uint8).reshape(KAPPA, m // 8)
    rows = np.packbits(np.unpackbits(mat, axis=1).T, axis=1)
    return [rows[j].tobytes() for j in range(m)]


def _pack_bits(bits):
    return np.packbits(np.array(bits, dtype=np.uint8)).tobytes()


def _unpack_bits(blob, n):
    return [int(b) for b in np.unpackbits(np.frombuffer(blob, dtype=np.uint8),
                                          count=n)]


class OtExtSender:
    """Holds label pairs; the peer picks one of each without revealing which."""

    def __init__(self, send, recv, rng=None, group=GROUP_DEFAULT,
                 batch=DEFAULT_BATCH):
        self._send = send
        self._recv = recv
        self._rng = rng or make_rng()
        self._group = group
        self._batch_size = batch
        self._batch = 0
        self._s_bits = None
        self._s_bytes = None
        self._seeds = None
        self._a0 = []
        self._a1 = []

    def setup(self):
        self._s_bits = [self._rng.getrandbits(1) for _ in range(KAPPA)]
        self._s_bytes = _pack_bits(self._s_bits)
        self._seeds = base_ot_recv(self._send, self._recv, self._s_bits,
                                   self._group, self._rng)

    def _extend(self, m):
        blob = self._recv()
        if len(blob) != KAPPA * m // 8:
            raise ProtocolError("OT extension matrix has wrong size")
        cols = []
        for i in range(KAPPA):
            t = _prg(self._seeds[i], m // 8, self._batch)
            u = blob[i * m // 8:(i + 1) * m // 8]
            cols.append(xor_bytes(t, u) if self._s_bits[i] else t)
        for j, row in enumerate(_transpose_bits(cols, m)):
            self._a0.append(_row_hash(self._batch, j, row))
            self._a1.append(_row_hash(self._batch, j,
                                      xor_bytes(row, self._s_bytes)))
        self._batch += 1

    def _ensure(self, n):
        while len(self._a0) < n:
            self._extend(max(self._batch_size, (n + 7) // 8 * 8))

    def send_pairs(self, pairs):
        """Obliviously transfer one 16-byte label of each pair."""
        n = len(pairs)
        self._ensure(n)
        flips = _unpack_bits(self._recv(), n)
        out = []
        for (x0, x1), e in zip(pairs, flips):
            a0, a1 = self._a0.pop(0), self._a1.pop(0)
            pads = (a0, a1) if e == 0 else (a1, a0)
            out.append(xor_bytes(x0, pads[0]) + xor_bytes(x1, pads[1]))
        self._send(b"".join(out))


class OtExtReceiver:
    """Chooses one label per pair by choice bit; sender stays oblivious."""

    def __init__(self, send, recv, rng=None, group=GROUP_DEFAULT,
                 batch=DEFAULT_BATCH):
        self._send = send
        self._recv = recv
        self._rng = rng or make_rng()
        self._group = group
        self._batch_size = batch
        self._batch = 0
        self._seed_pairs = None
        self._rho = []
        self._pads = []

    def setup(self):
        self._seed_pairs = [
            (self._rng.getrandbits(256).to_bytes(SEED_BYTES, "big"),
             self._rng.getrandbits(256).to_bytes(SEED_BYTES, "big"))
            for _ in range(KAPPA)]
        base_ot_send(self._send, self._recv, self._seed_pairs,
                     self._group, self._rng)

    def _extend(self, m):
        rho = bytes(self._rng.getrandbits(8) for _ in range(m // 8))
        t_cols = []
        u_cols = []
        for k0, k1 in self._seed_pairs:
            t = _prg(k0, m // 8, self._batch)
            t_cols.append(t)
            u_cols.append(xor_bytes(xor_bytes(t, _prg(k1, m // 8, self._batch)),
                                    rho))
        self._send(b"".join(u_cols))
        rho_bits = _unpack_bits(rho, m)
        for j, row in enumerate(_transpose_bits(t_cols, m)):
            self._rho.append(rho_bits[j])
            self._pads.append(_row_hash(self._batch, j, row))
        self._batch += 1

    def _ensure(self, n):
        while len(self._rho) < n:
            self._extend(max(self._batch_size, (n + 7) // 8 * 8))

    def receive_pairs(self, choice_bits):
        """Receive the label selected by each choice bit."""
        n = len(choice_bits)
        self._ensure(n)
        rho = [self._rho.pop(0) for _ in range(n)]
        pads = [self._pads.pop(0) for _ in range(n)]
        self._send(_pack_bits([c ^ r for c, r in zip(choice_bits, rho)]))
        blob = self._recv()
        if len(blob) != 2 * n * LABEL_BYTES:
            raise ProtocolError("OT response length mismatch")
        out = []
        for j, (c, pad) in enumerate(zip(choice_bits, pads)):
            start = (2 * j + c) * LABEL_BYTES
            out.append(xor_bytes(blob[start:start + LABEL_BYTES], pad))
        return out


def ot_exchange(sender_label_pairs, receiver_choice_bits, rng=None,
                group=GROUP_DEFAULT):
    """White-box helper: run both OT ends in-process over queue pipes.

    Exercises the full base-OT + extension + derandomization stack and
    returns the labels the receiver obtained.
    """
    import queue
    import threading

    if len(sender_label_pairs) != len(receiver_choice_bits):
        raise ProtocolError("one label pair required per choice bit")
    rng = rng or make_rng()
    to_sender, to_receiver = queue.Queue(), queue.Queue()
    sender = OtExtSender(to_receiver.put, to_sender.get,
                         make_rng(rng.getrandbits(64)), group)
    receiver = OtExtReceiver(to_sender.put, to_receiver.get,
                             make_rng(rng.getrandbits(64)), group)
    result = {}

    def run_receiver():
        receiver.setup()
        result["labels"] = receiver.receive_pairs(list(receiver_choice_bits))

    t = threading.Thread(target=run_receiver)
    t.start()
    sender.setup()
    sender.send_pairs(list(sender_label_pairs))
    t.join()
    return result["labels"]
