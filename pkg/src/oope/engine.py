"""Role state machines for oblivious order-preserving encryption.

Three engines cooperate per session: the server (CSP) walks its tree
and orchestrates, the key owner (DO) decrypts blinded nodes and
generates comparison circuits, the analyst (DA) evaluates them.  Per
round the server blinds the current node additively, owner and analyst
compare the blinded values inside a garbled circuit whose outputs carry
XOR masks from both, and the server unmasks the bits from the two share
messages, cross-checking both reconstructions.  A session always runs
exactly h = tree height comparison rounds; once the walk stops, the
remaining rounds replay the same node so neither the owner nor the
analyst learns where the value landed.

In frequency-hiding mode the circuit emits a single traversal bit that
hides equality behind a sticky shared coin, duplicates get fresh
orders, and a follow-up exchange hands the analyst the minimum and
maximum order of its plaintext for query rewriting.

Abort discipline: the party that detects a problem sends ABORT to both
peers and stops; nobody forwards aborts except the analyst, which
relays an owner-side abort to the server (the server never reads the
owner channel while waiting on the analyst).  Stale aborts from a dead
session are dropped by session-id filtering in Channel.recv.
"""

import hashlib
import time
from dataclasses import dataclass
from typing import Optional

from . import garbling, integrity, ope_state, paillier, transport
from .comparator import (build_comparator, build_fh_comparator,
                         comparator_inputs, int_to_bits)
from .errors import (CapacityError, ConfigurationError, FramingError,
                     GapExhausted, HandshakeError, IntegrityError,
                     ProtocolError, SessionAborted, UsageError)
from .ope_state import MODE_DET, MODE_FH, OpeEntry, OpeTable, OpeTree
from .ot import GROUP_DEFAULT, OtExtReceiver, OtExtSender
from .rng import make_rng
from .transport import (CIPHER_UPLOAD, CLEANUP, CLEANUP_DONE, Frame,
                        GC_PAYLOAD, GC_RESULT, QUERY_EXEC, QUERY_RESULT,
                        INTEGRITY_PROOF, INTEGRITY_TAG, MINMAX_RANDOMS,
                        MINMAX_SELECTED, MINMAX_TRIPLE, NULL_SESSION,
                        ORDER_RESULT, OT_MSG, RANDOM_OFFSET, RANDOMIZED_NODE,
                        REBALANCE, SESSION_DONE, SESSION_START, SHARES,
                        UID_COMPARE)
from .wire import fixed_bytes, lp, read_bytes, read_int, read_lp, u16, u32

OP_ENCRYPT = 0
OP_ENCRYPT_MINMAX = 1

UPLOAD_CIPHER = 0
UPLOAD_UID = 1

OFFSET_BYTES = 16      # additive blinding offsets on the wire
PED_BLIND_BYTES = 64   # commitment-randomness blinding offsets
DA_KEY_EXTRA_BITS = 64  # analyst modulus strictly dominates the owner's


_SCHEME_OFF = integrity.SCHEME_OFF
_DEFAULT_SUBGROUP_BITS = integrity.DEFAULT_SUBGROUP_BITS


@dataclass
class ProtocolParams:
    """Shared protocol parameters; the digest gates every handshake."""

    l: int = 32
    k: int = 32
    m: int = (1 << 32) - 5
    mode: str = MODE_DET
    key_bits: int = 2048
    integrity: str = _SCHEME_OFF
    mac_subgroup_bits: int = _DEFAULT_SUBGROUP_BITS
    uid_upload: bool = False
    ot_batch: int = 2048

    @property
    def width(self) -> int:
        # compared values are x+r with r < 2^(l+k), so sums need one
        # extra carry bit
        return self.l + self.k + 1

    def digest(self) -> bytes:
        blob = (b"oope-params" + u16(transport.PROTOCOL_VERSION) +
                u16(self.l) + u16(self.k) + fixed_bytes(self.m, 16) +
                self.mode.encode() + b"|" + self.integrity.encode() +
                bytes([self.uid_upload]) + u16(self.key_bits) +
                u16(self.mac_subgroup_bits))
        return hashlib.sha256(blob).digest()

    def validate(self):
        if self.mode not in (MODE_DET, MODE_FH):
            raise ConfigurationError(f"unknown mode {self.mode!r}")
        if self.integrity == integrity.SCHEME_PEDERSEN and \
                self.key_bits < self.mac_subgroup_bits + self.k + 8:
            raise ConfigurationError(
                "key too small to blind commitment randomness")
        if self.mac_subgroup_bits + self.k > 8 * PED_BLIND_BYTES:
            raise ConfigurationError("commitment blinding exceeds wire width")
        if self.uid_upload and self.mode == MODE_FH:
            raise ConfigurationError(
                "uid upload is excluded from frequency-hiding mode")

    def build_circuit(self):
        if self.mode == MODE_FH:
            return build_fh_comparator(self.width)
        return build_comparator(self.width)


@dataclass
class ServerState:
    """One column's state at the server: the table, its tree, the key."""

    table: OpeTable
    tree: OpeTree
    pk_owner: paillier.PaillierPublicKey
    pk_analyst: Optional[paillier.PaillierPublicKey] = None

    @classmethod
    def from_table(cls, table: OpeTable, pk_owner):
        tree = OpeTree()
        tree.rebuild_balanced(table.orders())
        return cls(table=table, tree=tree, pk_owner=pk_owner)

DEFAULT_COLUMN = ""


def _offset_blob(v: int) -> bytes:
    return fixed_bytes(v, OFFSET_BYTES)


def _pack_bits(bits) -> bytes:
    v = 0
    for i, b in enumerate(bits):
        v |= (b & 1) << i
    return bytes([v])


def _unpack_bits(blob: bytes, n: int):
    return [(blob[0] >> i) & 1 for i in range(n)]


class _Timers(dict):
    def add(self, key, ns):
        self[key] = self.get(key, 0) + ns


def wire_group(v: int, mac_params) -> bytes:
    return fixed_bytes(v, (mac_params.p.bit_length() + 7) // 8)


def make_node_tagger(scheme, mac_params, pk, rng):
    """Owner-side closure tagging each plaintext at initialization."""
    if scheme == integrity.SCHEME_OFF:
        return None
    if scheme == integrity.SCHEME_DLMAC:
        def tag(x):
            return wire_group(integrity.dl_mac_make(x, mac_params),
                              mac_params)
        return tag

    def tag(x):
        a = rng.randrange(mac_params.q)
        commit = integrity.ped_commit_make(x, a, mac_params)
        return lp(wire_group(commit, mac_params)) + \
            paillier.cipher_record(paillier.encrypt(pk, a, rng), pk.key_bits)
    return tag


def _parse_ped_tag(blob, key_id):
    if not blob:
        raise IntegrityError("node lacks its integrity tag")
    commit, off = read_lp(blob, 0)
    a_cipher, off = paillier.parse_cipher_record(blob, off, key_id)
    return commit, a_cipher


# ---------------------------------------------------------------------------
# Server engine

class CspEngine:
    """Holds the OPE state and orchestrates sessions one at a time."""

    def __init__(self, state=None, params: ProtocolParams = None, rng=None,
                 pool: paillier.RandomnessPool = None, states: dict = None):
        params.validate()
        if states is None:
            states = {DEFAULT_COLUMN: state}
        self.states = states
        self.state = next(iter(states.values()))
        self._column = DEFAULT_COLUMN
        self.rows = None  # optional RowStore for query execution
        self.params = params
        self.rng = rng or make_rng()
        self.pool = pool
        self.do_ch = None
        self.da_ch = None
        self.sessions_served = 0  # rate-limiting hook for host applications
        self.timers = _Timers()
        self.round_times_ns = []
        self.on_rebalance = None  # callback(remap) for the row store

    def reset_timers(self):
        self.timers.clear()
        self.round_times_ns.clear()

    def attach(self, do_ch, da_ch):
        self.do_ch = do_ch
        self.da_ch = da_ch
        digest = self.params.digest()
        role, do_extra = transport.handshake(do_ch, transport.ROLE_CSP, digest)
        if role != transport.ROLE_DO:
            raise HandshakeError("expected the owner on the first connection")
        pk_do, _ = paillier.parse_public_key(do_extra)
        if pk_do.key_id != self.state.pk_owner.key_id:
            raise HandshakeError("owner key does not match server state")
        extra = paillier.serialize_public_key(self.state.pk_owner)
        role, da_extra = transport.handshake(da_ch, transport.ROLE_CSP, digest,
                                             extra)
        if role != transport.ROLE_DA:
            raise HandshakeError("expected the analyst on the second "
                                 "connection")
        if da_extra:
            pk_da, _ = paillier.parse_public_key(da_extra)
            for st in self.states.values():
                st.pk_analyst = pk_da

    def serve(self, max_sessions=None):
        """Accept encryption sessions until the analyst channel closes."""
        served = 0
        while max_sessions is None or served < max_sessions:
            try:
                frame = self.da_ch.recv(SESSION_START, QUERY_EXEC, CLEANUP)
            except (FramingError, SessionAborted):
                if self.da_ch.poisoned:
                    return
                continue
            served += 1
            try:
                if frame.ftype == QUERY_EXEC:
                    self._exec_query(frame)
                elif frame.ftype == CLEANUP:
                    self._exec_cleanup(frame)
                else:
                    column = frame.payload[1:].decode("utf-8", "replace")
                    self.run_session(frame.session_id, frame.payload[0],
                                     column)
            except SessionAborted:
                continue

    def run_session(self, sid: bytes, op: int, column: str = DEFAULT_COLUMN):
        """Protocol main loop: h compare rounds, order assignment, upload."""
        if column not in self.states:
            reason = f"unknown column {column!r}"
            self.da_ch.abort(sid, reason)
            self.do_ch.abort(sid, reason)
            raise SessionAborted(reason)
        self.state = self.states[column]
        self._column = column
        table, tree = self.state.table, self.state.tree
        undo = []
        try:
            node = tree.root
            h = tree.height
            b_e, b_g = 1, 0
            fh_bit = 0
            for _ in range(h):
                t0 = time.perf_counter_ns()
                if self.params.mode == MODE_FH:
                    fh_bit = self._compare_round_fh(sid, node)
                    nxt = tree.child(node, fh_bit)
                    if nxt is not None:
                        node = nxt
                else:
                    b_e, b_g = self._compare_round(sid, node)
                    if b_e != 0:
                        nxt = tree.child(node, b_g)
                        if nxt is not None:
                            node = nxt
                self.round_times_ns.append(time.perf_counter_ns() - t0)

            side = fh_bit if self.params.mode == MODE_FH else b_g
            if node is None:
                ybar = ope_state.assign_order(0, table.m)
                is_known = False
            elif self.params.mode == MODE_DET and b_e == 0:
                ybar = node
                is_known = True
            else:
                ybar, node = self._encrypt_order(side, node, undo)
                is_known = False

            self.da_ch.send(Frame(ORDER_RESULT, sid, _offset_blob(ybar)))
            upload = self.da_ch.recv(CIPHER_UPLOAD, session=sid)
            if not is_known:
                self._store_upload(sid, upload.payload, ybar, node, side, undo)
            if op == OP_ENCRYPT_MINMAX:
                if self.params.mode != MODE_FH:
                    raise ProtocolError("min/max orders exist only in "
                                        "frequency-hiding mode")
                self._min_max(sid, ybar)
            self.do_ch.send(Frame(SESSION_DONE, sid))
            self.da_ch.send(Frame(SESSION_DONE, sid))
            self.sessions_served += 1
            return ybar
        except SessionAborted as e:
            for action in reversed(undo):
                action()
            if not e.remote:  # locally raised: peers were already notified
                raise
            raise
        except (IntegrityError, ProtocolError, CapacityError,
                ConfigurationError) as e:
            for action in reversed(undo):
                action()
            self.da_ch.abort(sid, str(e))
            self.do_ch.abort(sid, str(e))
            raise SessionAborted(str(e)) from e

    # -- rounds --

    def _blind_node(self, sid, entry):
        p = self.params
        r = self.rng.randrange(0, 1 << (p.l + p.k))
        t0 = time.perf_counter_ns()
        pk = self.state.pk_owner
        c_r = paillier.encrypt(pk, r, self.rng, self.pool)
        blinded = paillier.hom_add(pk, entry.cipher, c_r)
        self.timers.add("hom_ns", time.perf_counter_ns() - t0)
        payload = paillier.cipher_record(blinded, pk.key_bits)
        extra_da = b""
        if p.integrity == integrity.SCHEME_DLMAC:
            if not entry.node_tag:
                raise IntegrityError("node lacks its integrity tag")
            extra_da = lp(entry.node_tag)
        elif p.integrity == integrity.SCHEME_PEDERSEN:
            commit_blob, a_cipher = _parse_ped_tag(entry.node_tag, pk.key_id)
            rp = self.rng.randrange(0, 1 << (p.mac_subgroup_bits + p.k))
            c_rp = paillier.encrypt(pk, rp, self.rng, self.pool)
            payload += paillier.cipher_record(
                paillier.hom_add(pk, a_cipher, c_rp), pk.key_bits)
            extra_da = lp(commit_blob) + fixed_bytes(rp, PED_BLIND_BYTES)
        self.do_ch.send(Frame(RANDOMIZED_NODE, sid, payload))
        self.da_ch.send(Frame(RANDOM_OFFSET, sid, _offset_blob(r)))
        if p.integrity != integrity.SCHEME_OFF:
            self.da_ch.send(Frame(INTEGRITY_TAG, sid, extra_da))

    def _collect_shares(self, sid, n_bits):
        da = _unpack_bits(self.da_ch.recv(SHARES, session=sid).payload, n_bits)
        do = _unpack_bits(self.do_ch.recv(SHARES, session=sid).payload, n_bits)
        return da, do

    def _compare_round(self, sid, node_order):
        entry = self.state.table.get(node_order)
        if entry.cipher is None:
            return self._uid_compare_round(sid, entry)
        self._blind_node(sid, entry)
        da, do = self._collect_shares(sid, 4)
        b_e = da[2] ^ do[0]
        b_g = da[3] ^ do[1]
        if b_e != (do[2] ^ da[0]) or b_g != (do[3] ^ da[1]):
            raise IntegrityError("comparison share reconstructions disagree")
        return b_e, b_g

    def _compare_round_fh(self, sid, node_order):
        entry = self.state.table.get(node_order)
        self._blind_node(sid, entry)
        da, do = self._collect_shares(sid, 2)
        b = da[1] ^ do[0]
        if b != (do[1] ^ da[0]):
            raise IntegrityError("comparison share reconstructions disagree")
        return b

    def _uid_compare_round(self, sid, entry):
        # analyst-owned node: the analyst alone resolves the comparison
        self.da_ch.send(Frame(UID_COMPARE, sid, entry.tag))
        bits = _unpack_bits(self.da_ch.recv(SHARES, session=sid).payload, 2)
        return bits[0], bits[1]

    # -- order assignment and state updates --

    def _encrypt_order(self, b_g, node_order, undo):
        table = self.state.table
        direction = "right" if b_g else "left"
        y_l, y_r, _ = table.neighbors(node_order, direction)
        try:
            return ope_state.assign_order(y_l, y_r), node_order
        except GapExhausted:
            if self.params.mode == MODE_FH:
                raise CapacityError(
                    "unit gap requires a rebalance, which frequency-hiding "
                    "state does not support") from None
            remap = self._rebalance(undo)
            node_order = remap[node_order]
            y_l, y_r, _ = table.neighbors(node_order, direction)
            try:
                return ope_state.assign_order(y_l, y_r), node_order
            except GapExhausted:
                # uniform respread left no room here: M is too dense
                raise CapacityError("order space too dense for another "
                                    "entry at this position") from None

    def _rebalance(self, undo):
        table, tree = self.state.table, self.state.tree
        old_children = {k: list(v) for k, v in tree._children.items()}
        old_root, old_depth = tree.root, dict(tree._depth)
        old_height = tree.height
        remap = ope_state.rebalance(table, tree)

        def restore():
            table.reassign_orders({v: k for k, v in remap.items()})
            tree.root, tree.height = old_root, old_height
            tree._children, tree._depth = old_children, old_depth

        undo.append(restore)
        col = self._column.encode()
        payload = u16(len(col)) + col + u32(len(remap)) + b"".join(
            _offset_blob(a) + _offset_blob(b) for a, b in sorted(remap.items()))
        self.do_ch.send(Frame(REBALANCE, NULL_SESSION, payload))
        if self.rows is not None:
            self.rows.apply_remap(self._column, remap)
        if self.on_rebalance:
            self.on_rebalance(self._column, remap)
        return remap

    def _store_upload(self, sid, payload, ybar, node_order, side, undo):
        kind, off = read_int(payload, 0, 1)
        table, tree = self.state.table, self.state.tree
        pk = self.state.pk_owner
        if kind == UPLOAD_UID:
            if not self.params.uid_upload or self.params.mode == MODE_FH:
                raise ProtocolError("uid upload not allowed by configuration")
            uid, off = read_bytes(payload, off, 16)
            entry = OpeEntry(None, ybar, tag=uid)
        else:
            cipher, off = paillier.parse_cipher_record(payload, off, pk.key_id)
            entry = OpeEntry(cipher, ybar, tag=sid)
            if off < len(payload):
                entry.node_tag, off = read_lp(payload, off)
        if self.params.mode == MODE_FH:
            entry.fh_min = paillier.encrypt(pk, ybar, self.rng, self.pool)
            entry.fh_max = paillier.encrypt(pk, ybar, self.rng, self.pool)
        # BST descent by order lands exactly on the traversal's empty
        # slot, and stays correct when a rebalance reshaped the tree
        table.insert(entry)
        tree.insert_bst(ybar)

        def restore():
            table.remove(ybar)
            tree.rebuild_balanced(table.orders())

        undo.append(restore)

    # -- min/max order exchange --

    def _neighbor_ciphers(self, ybar):
        """Entries around the fresh order; a virtual bound becomes a
        ciphertext of 2^l, which never equals an analyst plaintext."""
        table = self.state.table
        pk = self.state.pk_owner
        sentinel = 1 << self.params.l

        def materialize(entry):
            if entry is not None:
                return entry.cipher, entry.fh_min, entry.fh_max
            c = paillier.encrypt(pk, sentinel, self.rng, self.pool)
            zero = paillier.encrypt(pk, 0, self.rng, self.pool)
            return c, zero, zero

        _, _, pred = table.neighbors(ybar, "left")
        _, _, succ = table.neighbors(ybar, "right")
        return materialize(pred), materialize(succ)

    def _min_max(self, sid, ybar):
        import math

        pk = self.state.pk_owner
        pk_da = self.state.pk_analyst
        if pk_da is None:
            raise ProtocolError("analyst public key missing for min/max")
        (pred_c, pred_min, _), (succ_c, _, succ_max) = \
            self._neighbor_ciphers(ybar)
        xbar_c = self.state.table.get(ybar).cipher
        width = pk.key_bits // 8
        randoms = []
        for side, bound_c, extreme_c in ((0, pred_c, pred_min),
                                         (1, succ_c, succ_max)):
            s = self.rng.randrange(1, pk.n)
            while True:
                r = self.rng.randrange(1, pk.n)
                if math.gcd(r, pk.n) == 1:
                    break
            randoms.append(r)
            d = paillier.hom_scale(pk, paillier.hom_sub(pk, bound_c, xbar_c),
                                   s)
            masked_y = paillier.encrypt(pk_da, ybar * r % pk.n, self.rng)
            masked_extreme = paillier.hom_scale(pk, extreme_c, r)
            self.do_ch.send(Frame(
                MINMAX_TRIPLE, sid,
                bytes([side])
                + paillier.cipher_record(d, pk.key_bits)
                + paillier.cipher_record(masked_y, pk_da.key_bits)
                + paillier.cipher_record(masked_extreme, pk.key_bits)))
        self.da_ch.send(Frame(MINMAX_RANDOMS, sid,
                              fixed_bytes(randoms[0], width) +
                              fixed_bytes(randoms[1], width)))

    def _exec_query(self, frame):
        import json

        from . import datastore
        if self.rows is None:
            self.da_ch.abort(frame.session_id, "server holds no row store")
            raise SessionAborted("server holds no row store")
        spec = json.loads(frame.payload.decode())
        query = datastore.RangeQuery(
            bounds={c: tuple(iv) for c, iv in spec["bounds"].items()},
            projection=spec.get("projection"))
        result = datastore.exec_range(self.rows, query)
        self.da_ch.send(Frame(QUERY_RESULT, frame.session_id,
                              json.dumps(result).encode()))

    def _exec_cleanup(self, frame):
        from . import datastore
        sids = None
        if frame.payload:
            sids = [frame.payload[i:i + 16]
                    for i in range(0, len(frame.payload), 16)]
        removed = 0
        for st in self.states.values():
            removed += datastore.cleanup_da_entries(st.table, st.tree, sids)
        self.da_ch.send(Frame(CLEANUP_DONE, frame.session_id, u32(removed)))


# ---------------------------------------------------------------------------
# Owner engine

class DoEngine:
    """Decrypts blinded nodes, generates circuits, sends its shares."""

    def __init__(self, sk: paillier.PaillierPrivateKey, params: ProtocolParams,
                 rng=None, mac_params=None, owner=None, owners=None,
                 ot_group=GROUP_DEFAULT):
        params.validate()
        if params.integrity != integrity.SCHEME_OFF and mac_params is None:
            raise ConfigurationError("integrity enabled but no MAC parameters")
        self.sk = sk
        self.params = params
        self.rng = rng or make_rng()
        self.mac_params = mac_params
        self.owners = owners if owners is not None else \
            ({DEFAULT_COLUMN: owner} if owner is not None else {})
        self.ot_group = ot_group
        self.circuit = params.build_circuit()
        self.pk_analyst = None
        self.timers = _Timers()
        self._sid = NULL_SESSION
        self._ot_seq = 0
        self._fh_shares = (0, 0)

    def reset_timers(self):
        self.timers.clear()

    def attach(self, csp_ch, da_ch):
        self.csp_ch = csp_ch
        self.da_ch = da_ch
        digest = self.params.digest()
        extra = paillier.serialize_public_key(self.sk.public)
        transport.handshake(csp_ch, transport.ROLE_DO, digest, extra)
        do_extra = b""
        if self.mac_params is not None and \
                self.params.integrity != integrity.SCHEME_OFF:
            do_extra = integrity.serialize_params(self.mac_params)
        _, da_extra = transport.handshake(da_ch, transport.ROLE_DO, digest,
                                          do_extra)
        if da_extra:
            self.pk_analyst, _ = paillier.parse_public_key(da_extra)
        self.ot_sender = OtExtSender(self._ot_send, self._ot_recv, self.rng,
                                     self.ot_group, self.params.ot_batch)
        self.ot_sender.setup()

    def _ot_send(self, blob):
        self.da_ch.send(Frame(OT_MSG, self._sid, u32(self._ot_seq) + blob))
        self._ot_seq += 1

    def _ot_recv(self):
        frame = self.da_ch.recv(OT_MSG, session=self._sid)
        seq, _ = read_int(frame.payload, 0, 4)
        if seq != self._ot_seq:
            raise ProtocolError(f"OT message out of order ({seq})")
        self._ot_seq += 1
        return frame.payload[4:]

    def serve(self, max_sessions=None):
        done = 0
        while max_sessions is None or done < max_sessions:
            try:
                frame = self.csp_ch.recv(RANDOMIZED_NODE, SESSION_DONE,
                                         MINMAX_TRIPLE, REBALANCE)
            except FramingError:
                return
            except SessionAborted:
                self._reset_session()
                continue
            try:
                if frame.ftype == RANDOMIZED_NODE:
                    self._round(frame)
                elif frame.ftype == MINMAX_TRIPLE:
                    self._min_max(frame)
                elif frame.ftype == REBALANCE:
                    self._apply_remap(frame.payload)
                else:
                    done += 1
                    self._reset_session()
            except SessionAborted:
                self._reset_session()
                continue

    def _reset_session(self):
        self._sid = NULL_SESSION
        self._fh_shares = (0, 0)

    def _begin(self, sid):
        if sid != self._sid:
            self._sid = sid
            self._fh_shares = (0, 0)

    def _abort(self, sid, reason):
        self.csp_ch.abort(sid, reason)
        self.da_ch.abort(sid, reason)
        raise SessionAborted(reason)

    def _round(self, frame):
        self._begin(frame.session_id)
        sid = frame.session_id
        p = self.params
        payload = frame.payload
        t0 = time.perf_counter_ns()
        cipher, off = paillier.parse_cipher_record(payload, 0,
                                                   self.sk.public.key_id)
        v = paillier.decrypt(self.sk, cipher)
        self.timers.add("decrypt_ns", time.perf_counter_ns() - t0)
        if not 0 <= v < (1 << (p.l + p.k)) + (1 << p.l):
            self._abort(sid, "blinded node out of range")
        if p.integrity == integrity.SCHEME_PEDERSEN:
            a_cipher, off = paillier.parse_cipher_record(
                payload, off, self.sk.public.key_id)
            t0 = time.perf_counter_ns()
            a_blind = paillier.decrypt(self.sk, a_cipher)
            self.timers.add("decrypt_ns", time.perf_counter_ns() - t0)
            proof = integrity.ped_open(v, a_blind, self.mac_params)
            self.da_ch.send(Frame(INTEGRITY_PROOF, sid,
                                  wire_group(proof, self.mac_params)))
        elif p.integrity == integrity.SCHEME_DLMAC:
            proof = integrity.dl_open(v, self.mac_params)
            self.da_ch.send(Frame(INTEGRITY_PROOF, sid,
                                  wire_group(proof, self.mac_params)))

        t0 = time.perf_counter_ns()
        gc = garbling.GarbledCircuit(self.circuit, self.rng)
        if p.mode == MODE_FH:
            b_o = self.rng.getrandbits(1)
            r_x = self.rng.getrandbits(1)
            s_e, s_r = self.rng.getrandbits(1), self.rng.getrandbits(1)
            sh_e, sh_r = self._fh_shares
            gen_bits = int_to_bits(v, p.width) + [b_o, r_x, sh_e, sh_r, s_e,
                                                  s_r]
            self._fh_shares = (s_e, s_r)
        else:
            b_o, bp_o = self.rng.getrandbits(1), self.rng.getrandbits(1)
            gen_bits = comparator_inputs(p.width, v, b_o, bp_o)
        blob = garbling.payload(gc, gen_bits)
        self.timers.add("garble_ns", time.perf_counter_ns() - t0)
        self.da_ch.send(Frame(GC_PAYLOAD, sid, blob))
        t0 = time.perf_counter_ns()
        self.ot_sender.send_pairs(gc.eval_label_pairs())
        self.timers.add("ot_ns", time.perf_counter_ns() - t0)
        result = self.da_ch.recv(GC_RESULT, session=sid)
        if p.mode == MODE_FH:
            b_masked = result.payload[0] & 1
            shares = [b_o, b_masked ^ b_o]
        else:
            ce_m = result.payload[0] & 1
            cg_m = (result.payload[0] >> 1) & 1
            shares = [b_o, bp_o, ce_m ^ b_o, cg_m ^ bp_o]
        self.csp_ch.send(Frame(SHARES, sid, _pack_bits(shares)))

    def _min_max(self, frame):
        """Decrypt the blinded difference and forward the selected
        analyst-key ciphertext for one side."""
        if self.pk_analyst is None:
            raise ProtocolError("analyst public key missing for min/max")
        self._begin(frame.session_id)
        payload = frame.payload
        side, off = read_int(payload, 0, 1)
        key_id = self.sk.public.key_id
        d_c, off = paillier.parse_cipher_record(payload, off, key_id)
        masked_y, off = paillier.parse_cipher_record(payload, off,
                                                     self.pk_analyst.key_id)
        masked_extreme, off = paillier.parse_cipher_record(payload, off,
                                                           key_id)
        t0 = time.perf_counter_ns()
        d = paillier.decrypt(self.sk, d_c)
        self.timers.add("decrypt_ns", time.perf_counter_ns() - t0)
        if d == 0:
            # neighbor equals the analyst's plaintext: hand over its
            # stored extreme, re-encrypted under the analyst's key
            v = paillier.decrypt(self.sk, masked_extreme)
            out = paillier.encrypt(self.pk_analyst, v, self.rng)
        else:
            # fresh order is the extreme; re-randomize so the analyst
            # cannot correlate with the server's ciphertext
            out = paillier.hom_add(
                self.pk_analyst, masked_y,
                paillier.encrypt(self.pk_analyst, 0, self.rng))
        self.da_ch.send(Frame(
            MINMAX_SELECTED, frame.session_id,
            bytes([side]) + paillier.cipher_record(out,
                                                   self.pk_analyst.key_bits)))

    def _apply_remap(self, payload):
        n, off = read_int(payload, 0, 2)
        column, off = read_bytes(payload, off, n)
        count, off = read_int(payload, off, 4)
        remap = {}
        for _ in range(count):
            old, off = read_int(payload, off, OFFSET_BYTES)
            new, off = read_int(payload, off, OFFSET_BYTES)
            remap[old] = new
        owner = self.owners.get(column.decode("utf-8", "replace"))
        if owner is not None:
            owner.apply_remap(remap)


# ---------------------------------------------------------------------------
# Analyst engine

class DaEngine:
    """Holds the query plaintext; evaluates circuits and collects orders."""

    def __init__(self, params: ProtocolParams, rng=None, keys=None,
                 ot_group=GROUP_DEFAULT):
        params.validate()
        self.params = params
        self.rng = rng or make_rng()
        self.keys = keys  # analyst (pk, sk), needed for min/max outputs
        self.ot_group = ot_group
        self.circuit = params.build_circuit()
        self.pk_owner = None
        self.mac_params = None
        self.timers = _Timers()
        self._sid = NULL_SESSION
        self._ot_seq = 0
        self._uids = {}
        self._current_xbar = None

    def reset_timers(self):
        self.timers.clear()

    def attach(self, csp_ch, do_ch):
        self.csp_ch = csp_ch
        self.da_do_ch = do_ch
        digest = self.params.digest()
        extra = b""
        if self.keys is not None:
            extra = paillier.serialize_public_key(self.keys[0])
        _, csp_extra = transport.handshake(csp_ch, transport.ROLE_DA, digest,
                                           extra)
        self.pk_owner, _ = paillier.parse_public_key(csp_extra)
        _, do_extra = transport.handshake(do_ch, transport.ROLE_DA, digest,
                                          extra)
        if do_extra:
            self.mac_params, _ = integrity.parse_params(do_extra)
        elif self.params.integrity != integrity.SCHEME_OFF:
            raise HandshakeError("integrity enabled but owner sent no "
                                 "verification parameters")
        self.ot_receiver = OtExtReceiver(self._ot_send, self._ot_recv,
                                         self.rng, self.ot_group,
                                         self.params.ot_batch)
        self.ot_receiver.setup()

    def _ot_send(self, blob):
        self.da_do_ch.send(Frame(OT_MSG, self._sid, u32(self._ot_seq) + blob))
        self._ot_seq += 1

    def _ot_recv(self):
        frame = self.da_do_ch.recv(OT_MSG, session=self._sid)
        seq, _ = read_int(frame.payload, 0, 4)
        if seq != self._ot_seq:
            raise ProtocolError(f"OT message out of order ({seq})")
        self._ot_seq += 1
        return frame.payload[4:]

    def encrypt(self, xbar: int, minmax: bool = False,
                column: str = DEFAULT_COLUMN):
        """Run one session; returns the order (plus min/max when asked)."""
        p = self.params
        if not 0 <= xbar < (1 << p.l):
            raise UsageError(f"query plaintext outside [0, 2^{p.l})")
        if minmax and p.mode != MODE_FH:
            raise UsageError(
                "min/max orders exist only in frequency-hiding mode")
        if minmax and self.keys is None:
            raise UsageError("analyst keys required for min/max")
        sid = bytes(self.rng.getrandbits(8) for _ in range(16))
        self._sid = sid
        self._current_xbar = xbar
        self._fh_shares = (1, 0)  # no equality yet; coin share zero
        op = OP_ENCRYPT_MINMAX if minmax else OP_ENCRYPT
        self.csp_ch.send(Frame(SESSION_START, sid,
                               bytes([op]) + column.encode()))
        try:
            ybar = None
            while ybar is None:
                frame = self.csp_ch.recv(RANDOM_OFFSET, ORDER_RESULT,
                                         UID_COMPARE, session=sid)
                if frame.ftype == ORDER_RESULT:
                    ybar = int.from_bytes(frame.payload, "big")
                elif frame.ftype == UID_COMPARE:
                    self._uid_round(frame)
                else:
                    self._round(sid, xbar,
                                int.from_bytes(frame.payload, "big"))
            self._upload(sid, xbar)
            if not minmax:
                self.csp_ch.recv(SESSION_DONE, session=sid)
                return ybar
            cmin, cmax = self._recv_min_max(sid)
            self.csp_ch.recv(SESSION_DONE, session=sid)
            return ybar, cmin, cmax
        except SessionAborted as e:
            # the server never reads the owner channel while waiting on
            # us, so relay owner-side aborts
            if e.remote and e.channel is self.da_do_ch:
                self.csp_ch.abort(sid, e.reason)
            raise
        finally:
            self._sid = NULL_SESSION

    def _verify_node(self, sid, r):
        tag_frame = self.csp_ch.recv(INTEGRITY_TAG, session=sid)
        proof_frame = self.da_do_ch.recv(INTEGRITY_PROOF, session=sid)
        m = int.from_bytes(proof_frame.payload, "big")
        if self.params.integrity == integrity.SCHEME_DLMAC:
            mac_blob, _ = read_lp(tag_frame.payload, 0)
            ok = integrity.dl_mac_verify(int.from_bytes(mac_blob, "big"), r,
                                         m, self.mac_params)
        else:
            commit_blob, off = read_lp(tag_frame.payload, 0)
            rp, off = read_int(tag_frame.payload, off, PED_BLIND_BYTES)
            ok = integrity.ped_verify(int.from_bytes(commit_blob, "big"), r,
                                      rp, m, self.mac_params)
        if not ok:
            self.csp_ch.abort(sid, "node authentication failed")
            self.da_do_ch.abort(sid, "node authentication failed")
            raise SessionAborted("node authentication failed")

    def _round(self, sid, xbar, r):
        p = self.params
        if p.integrity != integrity.SCHEME_OFF:
            self._verify_node(sid, r)
        gc_frame = self.da_do_ch.recv(GC_PAYLOAD, session=sid)
        tables, decode_info, labels = garbling.parse_payload(self.circuit,
                                                             gc_frame.payload)
        if p.mode == MODE_FH:
            b_a = self.rng.getrandbits(1)
            r_xbar = self.rng.getrandbits(1)
            sh_e, sh_r = self._fh_shares
            bits = int_to_bits(xbar + r, p.width) + [b_a, r_xbar, sh_e, sh_r]
        else:
            b_a, bp_a = self.rng.getrandbits(1), self.rng.getrandbits(1)
            bits = comparator_inputs(p.width, xbar + r, b_a, bp_a)
        t0 = time.perf_counter_ns()
        got = self.ot_receiver.receive_pairs(bits)
        self.timers.add("ot_ns", time.perf_counter_ns() - t0)
        labels.update(dict(zip(self.circuit.eval_inputs, got)))
        t0 = time.perf_counter_ns()
        out_labels = garbling.evaluate(self.circuit, tables, labels)
        outputs = garbling.decode(decode_info, out_labels)
        self.timers.add("eval_ns", time.perf_counter_ns() - t0)
        if p.mode == MODE_FH:
            b_masked = outputs[0]
            self._fh_shares = (outputs[1], outputs[2])
            self.da_do_ch.send(Frame(GC_RESULT, sid, _pack_bits([b_masked])))
            shares = [b_a, b_masked ^ b_a]
        else:
            ce_m, cg_m = outputs
            self.da_do_ch.send(Frame(GC_RESULT, sid, _pack_bits([ce_m, cg_m])))
            shares = [b_a, bp_a, ce_m ^ b_a, cg_m ^ bp_a]
        self.csp_ch.send(Frame(SHARES, sid, _pack_bits(shares)))

    def _uid_round(self, frame):
        mine = self._uids.get(frame.payload[:16])
        if mine is None:
            raise ProtocolError("server referenced an unknown uid node")
        xbar = self._current_xbar
        self.csp_ch.send(Frame(SHARES, frame.session_id,
                               _pack_bits([int(xbar != mine),
                                           int(xbar > mine)])))

    def _upload(self, sid, xbar):
        if self.params.uid_upload and self.params.mode == MODE_DET:
            uid = bytes(self.rng.getrandbits(8) for _ in range(16))
            self._uids[uid] = xbar
            self.csp_ch.send(Frame(CIPHER_UPLOAD, sid,
                                   bytes([UPLOAD_UID]) + uid))
            return
        cipher = paillier.encrypt(self.pk_owner, xbar, self.rng)
        payload = bytes([UPLOAD_CIPHER]) + \
            paillier.cipher_record(cipher, self.pk_owner.key_bits)
        if self.params.integrity == integrity.SCHEME_DLMAC:
            payload += lp(wire_group(
                integrity.dl_mac_make(xbar, self.mac_params),
                self.mac_params))
        elif self.params.integrity == integrity.SCHEME_PEDERSEN:
            a = self.rng.randrange(self.mac_params.q)
            commit = integrity.ped_commit_make(xbar, a, self.mac_params)
            blob = lp(wire_group(commit, self.mac_params)) + \
                paillier.cipher_record(
                    paillier.encrypt(self.pk_owner, a, self.rng),
                    self.pk_owner.key_bits)
            payload += lp(blob)
        self.csp_ch.send(Frame(CIPHER_UPLOAD, sid, payload))

    def query(self, bounds: dict, projection=None):
        """Run a range query at the server over already-obtained orders."""
        import json
        sid = bytes(self.rng.getrandbits(8) for _ in range(16))
        spec = {"bounds": {c: list(iv) for c, iv in bounds.items()},
                "projection": projection}
        self.csp_ch.send(Frame(transport.QUERY_EXEC, sid,
                               json.dumps(spec).encode()))
        frame = self.csp_ch.recv(transport.QUERY_RESULT, session=sid)
        return json.loads(frame.payload.decode())

    def cleanup(self, session_ids=None) -> int:
        """Ask the server to drop analyst-inserted table entries."""
        sid = bytes(self.rng.getrandbits(8) for _ in range(16))
        payload = b"".join(session_ids) if session_ids else b""
        self.csp_ch.send(Frame(transport.CLEANUP, sid, payload))
        frame = self.csp_ch.recv(transport.CLEANUP_DONE, session=sid)
        return int.from_bytes(frame.payload, "big")

    def _recv_min_max(self, sid):
        pk_da, sk_da = self.keys
        n_do = self.pk_owner.n
        width = self.pk_owner.key_bits // 8
        frame = self.csp_ch.recv(MINMAX_RANDOMS, session=sid)
        r1 = int.from_bytes(frame.payload[:width], "big")
        r2 = int.from_bytes(frame.payload[width:], "big")
        got = {}
        for _ in range(2):
            sel = self.da_do_ch.recv(MINMAX_SELECTED, session=sid)
            side, off = read_int(sel.payload, 0, 1)
            cipher, _ = paillier.parse_cipher_record(sel.payload, off,
                                                     pk_da.key_id)
            got[side] = paillier.decrypt(sk_da, cipher)
        cmin = got[0] * pow(r1, -1, n_do) % n_do
        cmax = got[1] * pow(r2, -1, n_do) % n_do
        return cmin, cmax
