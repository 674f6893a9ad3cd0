"""Mutable order-preserving encryption state.

The table holds ⟨homomorphic ciphertext, order⟩ pairs sorted by order;
the tree is a binary search tree over those orders used for traversal;
the owner keeps the plaintext/order pairs.  Orders live in [1, M-1],
with 0 and M acting as virtual neighbors of the extremes.  A fresh
order is the midpoint (rounded up) of its neighbor gap; a unit gap
signals GapExhausted and forces a rebalance that respreads all orders
uniformly while keeping their relative ranks.

Frequency-hiding mode stores one entry per plaintext occurrence plus
per-entry ciphertexts of the plaintext's minimum and maximum order,
which range queries need for rewriting.
"""

import hashlib
import io
import warnings
from bisect import bisect_left, bisect_right, insort
from dataclasses import dataclass, field
from typing import Optional

from . import paillier
from .errors import (CapacityError, ConfigurationError, DomainError,
                     GapExhausted, IntegrityError, UsageError)
from .rng import make_rng
from .wire import fixed_bytes, read_bytes, read_int, u16, u32

ORDER_BYTES = 16
MODE_DET, MODE_FH = "det", "fh"
TABLE_MAGIC = b"OPET"
OWNER_MAGIC = b"OPEO"
TABLE_VERSION = 1

FLAG_FH = 1
FLAG_TAGGED = 2
FLAG_NODETAG = 4


@dataclass
class OpeEntry:
    cipher: paillier.HomCiphertext
    order: int
    fh_min: Optional[paillier.HomCiphertext] = None
    fh_max: Optional[paillier.HomCiphertext] = None
    tag: Optional[bytes] = None       # session id of an analyst insert
    node_tag: Optional[bytes] = None  # serialized integrity tag


class OpeTable:
    """Entries sorted ascending by order; orders are unique."""

    def __init__(self, m: int, l: int, mode: str = MODE_DET,
                 key_bits: int = 0, key_id: bytes = b""):
        self.m = m
        self.l = l
        self.mode = mode
        self.key_bits = key_bits
        self.key_id = key_id
        self._orders = []
        self._by_order = {}

    def __len__(self):
        return len(self._orders)

    def orders(self):
        return list(self._orders)

    def entries(self):
        return [self._by_order[o] for o in self._orders]

    def get(self, order: int) -> OpeEntry:
        try:
            return self._by_order[order]
        except KeyError:
            raise UsageError(f"order {order} not present") from None

    def __contains__(self, order):
        return order in self._by_order

    def insert(self, entry: OpeEntry):
        if entry.order in self._by_order:
            raise IntegrityError(f"order collision at {entry.order}")
        if not 1 <= entry.order <= self.m - 1:
            raise DomainError("order outside [1, M-1]")
        insort(self._orders, entry.order)
        self._by_order[entry.order] = entry

    def remove(self, order: int) -> OpeEntry:
        entry = self.get(order)
        self._orders.pop(bisect_left(self._orders, order))
        del self._by_order[order]
        return entry

    def neighbors(self, node_order: int, direction: str):
        """(y_left, y_right, neighbor entry or None for a virtual bound)."""
        if node_order not in self._by_order:
            raise UsageError(f"order {node_order} not present")
        i = bisect_left(self._orders, node_order)
        if direction == "left":
            if i == 0:
                return 0, node_order, None
            y = self._orders[i - 1]
            return y, node_order, self._by_order[y]
        if direction == "right":
            if i == len(self._orders) - 1:
                return node_order, self.m, None
            y = self._orders[i + 1]
            return node_order, y, self._by_order[y]
        raise UsageError("direction must be 'left' or 'right'")

    def reassign_orders(self, remap: dict):
        entries = self.entries()
        for e in entries:
            e.order = remap[e.order]
        self._orders = sorted(remap[o] for o in self._orders)
        self._by_order = {e.order: e for e in entries}


class OpeTree:
    """BST over table orders; height counts nodes on the longest path."""

    def __init__(self):
        self.root = None
        self._children = {}
        self._depth = {}
        self.height = 0

    def __len__(self):
        return len(self._children)

    def child(self, order: int, go_right: int):
        return self._children[order][1 if go_right else 0]

    def insert_under(self, parent_order, go_right: int, order: int):
        if order in self._children:
            raise IntegrityError(f"tree already holds order {order}")
        if parent_order is None:
            if self.root is not None:
                raise UsageError("tree already has a root")
            self.root = order
            self._children[order] = [None, None]
            self._depth[order] = 0
            self.height = 1
            return
        slot = 1 if go_right else 0
        if self._children[parent_order][slot] is not None:
            raise IntegrityError("tree slot already occupied")
        if go_right and not order > parent_order:
            raise IntegrityError("BST violation on right insert")
        if not go_right and not order < parent_order:
            raise IntegrityError("BST violation on left insert")
        self._children[parent_order][slot] = order
        self._children[order] = [None, None]
        d = self._depth[parent_order] + 1
        self._depth[order] = d
        self.height = max(self.height, d + 1)

    def insert_bst(self, order: int):
        """Classic BST insertion from the root."""
        if self.root is None:
            self.insert_under(None, 0, order)
            return
        node = self.root
        while True:
            go_right = 1 if order > node else 0
            nxt = self._children[node][go_right]
            if nxt is None:
                self.insert_under(node, go_right, order)
                return
            node = nxt

    def in_order(self):
        out = []

        def walk(node):
            if node is None:
                return
            walk(self._children[node][0])
            out.append(node)
            walk(self._children[node][1])

        walk(self.root)
        return out

    def rebuild_balanced(self, sorted_orders):
        self.root = None
        self._children = {}
        self._depth = {}
        self.height = 0

        def build(lo, hi, parent, go_right):
            if lo >= hi:
                return
            mid = (lo + hi) // 2
            self.insert_under(parent, go_right, sorted_orders[mid])
            build(lo, mid, sorted_orders[mid], 0)
            build(mid + 1, hi, sorted_orders[mid], 1)

        build(0, len(sorted_orders), None, 0)


@dataclass
class OwnerState:
    """The data owner's plaintext/order pairs."""

    m: int
    l: int
    pairs: list = field(default_factory=list)

    def order_of(self, x: int):
        for px, py in self.pairs:
            if px == x:
                return py
        return None

    def orders_of(self, x: int):
        return sorted(py for px, py in self.pairs if px == x)

    def apply_remap(self, remap: dict):
        self.pairs = [(x, remap.get(y, y)) for x, y in self.pairs]


def assign_order(y_left: int, y_right: int) -> int:
    """Midpoint order y_left + ceil((y_right - y_left) / 2)."""
    if y_left >= y_right:
        raise UsageError("neighbor orders must satisfy y_left < y_right")
    gap = y_right - y_left
    if gap == 1:
        raise GapExhausted(f"unit gap at ({y_left}, {y_right})")
    return y_left + (gap + 1) // 2


def neighbors(table: OpeTable, node_order: int, direction: str):
    return table.neighbors(node_order, direction)


def insert_entry(table: OpeTable, tree: OpeTree, entry: OpeEntry,
                 parent_order, go_right: int):
    table.insert(entry)
    try:
        tree.insert_under(parent_order, go_right, entry.order)
    except (IntegrityError, UsageError):
        table.remove(entry.order)
        raise


def rebalance(table: OpeTable, tree: OpeTree) -> dict:
    """Respread all orders uniformly across [1, M-1]; rank is preserved.

    Returns the old-order -> new-order map the owner needs to update its
    pairs (and the row store its column values).
    """
    n = len(table)
    if n == 0:
        raise UsageError("cannot rebalance an empty table")
    if n >= table.m - 1:
        raise CapacityError("order space exhausted")
    old = table.orders()
    remap = {y: (i + 1) * table.m // (n + 1) +
             (1 if (i + 1) * table.m % (n + 1) else 0)
             for i, y in enumerate(old)}
    table.reassign_orders(remap)
    tree.rebuild_balanced(table.orders())
    return remap


def _local_insert_det(sorted_pairs, x, m):
    """mOPE2 order for x against sorted (plaintext, order) pairs.

    Returns (order, is_new); duplicates reuse the existing order.
    """
    xs = [p[0] for p in sorted_pairs]
    i = bisect_left(xs, x)
    if i < len(xs) and xs[i] == x:
        return sorted_pairs[i][1], False
    y_left = sorted_pairs[i - 1][1] if i > 0 else 0
    y_right = sorted_pairs[i][1] if i < len(xs) else m
    return assign_order(y_left, y_right), True


def _local_insert_fh(sorted_pairs, x, m, rng):
    """mOPE3 placement: a coin-chosen gap inside or adjacent to x's run."""
    xs = [p[0] for p in sorted_pairs]
    lo, hi = bisect_left(xs, x), bisect_right(xs, x)
    gap = rng.randint(lo, hi) if hi > lo else lo
    y_left = sorted_pairs[gap - 1][1] if gap > 0 else 0
    y_right = sorted_pairs[gap][1] if gap < len(xs) else m
    return assign_order(y_left, y_right)


def init_state(dataset, m: int, pk: paillier.PaillierPublicKey, l: int,
               mode: str = MODE_DET, rng=None, balance: bool = True,
               pool: paillier.RandomnessPool = None, tagger=None):
    """Build owner state, table and tree from a plaintext dataset.

    Insertion follows the dataset's given order.  With balance=True the
    tree is rebuilt balanced afterwards, which changes traversal paths
    but never the assigned orders.  tagger, when given, is called with
    each plaintext to produce the serialized integrity tag stored next
    to the entry.
    """
    dataset = list(dataset)
    n = len(dataset)
    if m <= max(2, n):
        raise ConfigurationError(f"order space M={m} too small for {n} entries")
    if m & (m - 1) == 0:
        warnings.warn("M is a power of two; orders may leak tree positions")
    rng = rng or make_rng()
    owner = OwnerState(m=m, l=l)
    sorted_pairs = []  # (plaintext, order), sorted by (plaintext, order)

    def place(x):
        if not 0 <= x < (1 << l):
            raise DomainError(f"plaintext {x} outside [0, 2^{l})")
        while True:
            try:
                if mode == MODE_DET:
                    y, is_new = _local_insert_det(sorted_pairs, x, m)
                else:
                    y, is_new = _local_insert_fh(sorted_pairs, x, m, rng), True
                return y, is_new
            except GapExhausted:
                # local respread during initialization; fh ciphertexts are
                # only computed afterwards, so this is safe in either mode
                k = len(sorted_pairs)
                if k >= m - 1:
                    raise CapacityError("order space exhausted at init")
                remap = {}
                for i, (px, py) in enumerate(sorted_pairs):
                    ny = (i + 1) * m // (k + 1) + \
                        (1 if (i + 1) * m % (k + 1) else 0)
                    remap[py] = ny
                    sorted_pairs[i] = (px, ny)
                owner.apply_remap(remap)

    insertion_orders = []
    for x in dataset:
        y, is_new = place(x)
        if is_new:
            insort(sorted_pairs, (x, y))
            insertion_orders.append(y)
        owner.pairs.append((x, y))

    table = OpeTable(m, l, mode, pk.key_bits, pk.key_id)
    if mode == MODE_FH:
        run_min = {}
        run_max = {}
        for x, y in sorted_pairs:
            run_min[x] = min(run_min.get(x, y), y)
            run_max[x] = max(run_max.get(x, y), y)
    for x, y in sorted_pairs:
        entry = OpeEntry(paillier.encrypt(pk, x, rng, pool), y)
        if mode == MODE_FH:
            entry.fh_min = paillier.encrypt(pk, run_min[x], rng, pool)
            entry.fh_max = paillier.encrypt(pk, run_max[x], rng, pool)
        if tagger is not None:
            entry.node_tag = tagger(x)
        table.insert(entry)

    tree = OpeTree()
    if balance:
        tree.rebuild_balanced(table.orders())
    else:
        for y in insertion_orders:
            tree.insert_bst(y)
    return owner, table, tree


# --- persistence ------------------------------------------------------------
# Table file:
#   magic | version u16 | l u16 | log2m u8 | mode u8 | key_bits u16 |
#   M 16B | count u64 | key_id 32B
#   per entry: order 16B | flags u8 | cipher record |
#              [fh_min record | fh_max record] | [tag 16B] |
#              [node tag: len u32 | blob]
#   sha256 trailer over everything above
#
# The tree is not persisted; it is rebuilt balanced on load.

class _HashingWriter:
    def __init__(self, fh):
        self.fh = fh
        self.hash = hashlib.sha256()
        self.written = 0

    def write(self, blob: bytes):
        if self.fh is not None:
            self.fh.write(blob)
        self.hash.update(blob)
        self.written += len(blob)


def serialize_table(table: OpeTable, fh=None) -> int:
    """Write the table; returns the byte count (fh=None just counts)."""
    w = _HashingWriter(fh)
    w.write(TABLE_MAGIC)
    w.write(u16(TABLE_VERSION))
    w.write(u16(table.l))
    w.write(bytes([table.m.bit_length(), 0 if table.mode == MODE_DET else 1]))
    w.write(u16(table.key_bits))
    w.write(fixed_bytes(table.m, 16))
    w.write(len(table).to_bytes(8, "big"))
    w.write(table.key_id or bytes(32))
    for e in table.entries():
        flags = (FLAG_FH if e.fh_min is not None else 0) | \
            (FLAG_TAGGED if e.tag is not None else 0) | \
            (FLAG_NODETAG if e.node_tag is not None else 0)
        w.write(fixed_bytes(e.order, ORDER_BYTES))
        w.write(bytes([flags]))
        w.write(paillier.cipher_record(e.cipher, table.key_bits))
        if e.fh_min is not None:
            w.write(paillier.cipher_record(e.fh_min, table.key_bits))
            w.write(paillier.cipher_record(e.fh_max, table.key_bits))
        if e.tag is not None:
            w.write(e.tag)
        if e.node_tag is not None:
            w.write(u32(len(e.node_tag)))
            w.write(e.node_tag)
    digest = w.hash.digest()
    if fh is not None:
        fh.write(digest)
    return w.written + len(digest)


def parse_table(blob: bytes) -> OpeTable:
    if len(blob) < 32 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise IntegrityError("table file checksum mismatch")
    if blob[:4] != TABLE_MAGIC:
        raise IntegrityError("not a table file")
    off = 4
    version, off = read_int(blob, off, 2)
    if version != TABLE_VERSION:
        raise IntegrityError(f"unsupported table version {version}")
    l, off = read_int(blob, off, 2)
    _log2m, off = read_int(blob, off, 1)
    mode_flag, off = read_int(blob, off, 1)
    key_bits, off = read_int(blob, off, 2)
    m, off = read_int(blob, off, 16)
    count, off = read_int(blob, off, 8)
    key_id, off = read_bytes(blob, off, 32)
    table = OpeTable(m, l, MODE_FH if mode_flag else MODE_DET, key_bits, key_id)
    for _ in range(count):
        order, off = read_int(blob, off, ORDER_BYTES)
        flags, off = read_int(blob, off, 1)
        cipher, off = paillier.parse_cipher_record(blob, off, key_id)
        entry = OpeEntry(cipher, order)
        if flags & FLAG_FH:
            entry.fh_min, off = paillier.parse_cipher_record(blob, off, key_id)
            entry.fh_max, off = paillier.parse_cipher_record(blob, off, key_id)
        if flags & FLAG_TAGGED:
            entry.tag, off = read_bytes(blob, off, 16)
        if flags & FLAG_NODETAG:
            n, off = read_int(blob, off, 4)
            entry.node_tag, off = read_bytes(blob, off, n)
        table.insert(entry)
    return table


def table_to_bytes(table: OpeTable) -> bytes:
    buf = io.BytesIO()
    serialize_table(table, buf)
    return buf.getvalue()


def table_layout(key_bits: int, log2m: int, mode: str = MODE_DET) -> dict:
    """Closed-form byte accounting for deterministic, untagged tables.

    payload per entry is the storage formula (2*log2N + log2M)/8; the
    rest of each record plus the header/trailer is framing overhead.
    """
    payload = 2 * key_bits // 8 + log2m // 8
    record = ORDER_BYTES + 1 + 4 + paillier.cipher_width(key_bits)
    if mode == MODE_FH:
        record += 2 * (4 + paillier.cipher_width(key_bits))
    header = len(TABLE_MAGIC) + 2 + 2 + 1 + 1 + 2 + 16 + 8 + 32 + 32
    return {"payload_per_entry": payload,
            "framing_per_entry": record - payload,
            "header_bytes": header,
            "record_bytes": record}


def serialized_table_size(n: int, key_bits: int, log2m: int,
                          mode: str = MODE_DET) -> dict:
    lay = table_layout(key_bits, log2m, mode)
    return {"payload_bytes": n * lay["payload_per_entry"],
            "framing_bytes": n * lay["framing_per_entry"],
            "header_bytes": lay["header_bytes"],
            "total_bytes": n * lay["record_bytes"] + lay["header_bytes"]}


def serialize_owner(owner: OwnerState, fh=None) -> int:
    w = _HashingWriter(fh)
    w.write(OWNER_MAGIC)
    w.write(u16(TABLE_VERSION))
    w.write(u16(owner.l))
    w.write(fixed_bytes(owner.m, 16))
    w.write(len(owner.pairs).to_bytes(8, "big"))
    for x, y in owner.pairs:
        w.write(fixed_bytes(x, 16))
        w.write(fixed_bytes(y, ORDER_BYTES))
    digest = w.hash.digest()
    if fh is not None:
        fh.write(digest)
    return w.written + len(digest)


def parse_owner(blob: bytes) -> OwnerState:
    if len(blob) < 32 or hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise IntegrityError("owner state checksum mismatch")
    if blob[:4] != OWNER_MAGIC:
        raise IntegrityError("not an owner state file")
    off = 4 + 2
    l, off = read_int(blob, off, 2)
    m, off = read_int(blob, off, 16)
    count, off = read_int(blob, off, 8)
    owner = OwnerState(m=m, l=l)
    for _ in range(count):
        x, off = read_int(blob, off, 16)
        y, off = read_int(blob, off, ORDER_BYTES)
        owner.pairs.append((x, y))
    return owner
