"""Wiring of the three roles over loopback queues or TCP sockets.

The server and owner engines run their serve loops on daemon threads;
the analyst drives sessions from the caller's thread.  One cluster
keeps its base-OT setup and randomness pools alive across every session
it runs, which is also how a deployment would hold a connection open
for a batch of queries.
"""

import threading

from . import ope_state, paillier, transport
from .engine import (CspEngine, DaEngine, DoEngine, ProtocolParams,
                     ServerState, make_node_tagger)
from .ot import GROUP_DEFAULT
from .rng import make_rng


def analyst_keygen(params: ProtocolParams, rng=None):
    """Analyst keypair; its modulus strictly dominates the owner's so
    cross-key re-encryptions in the min/max exchange never overflow."""
    from .engine import DA_KEY_EXTRA_BITS
    return paillier.keygen(params.key_bits + DA_KEY_EXTRA_BITS, rng=rng,
                           allow_small=True)


class LocalCluster:
    """All three roles in one process, linked by in-memory channels."""

    def __init__(self, state=None, sk=None, params: ProtocolParams = None,
                 seed=None, mac_params=None, owner=None, da_keys=None,
                 ot_group=GROUP_DEFAULT, csp_pool=None, record=False,
                 states=None):
        rng = make_rng(seed)
        seeds = [rng.getrandbits(64) for _ in range(3)] if seed is not None \
            else [None, None, None]
        self.csp = CspEngine(state, params, make_rng(seeds[0]), pool=csp_pool,
                             states=states)
        self.do = DoEngine(sk, params, make_rng(seeds[1]),
                           mac_params=mac_params, owner=owner,
                           ot_group=ot_group)
        self.da = DaEngine(params, make_rng(seeds[2]), keys=da_keys,
                           ot_group=ot_group)

        csp_do, do_csp = transport.loopback_pair("csp->do", "do->csp")
        csp_da, da_csp = transport.loopback_pair("csp->da", "da->csp")
        do_da, da_do = transport.loopback_pair("do->da", "da->do")
        self.channels = [csp_do, do_csp, csp_da, da_csp, do_da, da_do]
        if record:
            for ch in self.channels:
                ch.record = True

        self.errors = []
        self._threads = [
            threading.Thread(target=self._run_csp, args=(csp_do, csp_da),
                             daemon=True),
            threading.Thread(target=self._run_do, args=(do_csp, do_da),
                             daemon=True),
        ]
        for t in self._threads:
            t.start()
        self.da.attach(da_csp, da_do)

    def _run_csp(self, do_ch, da_ch):
        try:
            self.csp.attach(do_ch, da_ch)
            self.csp.serve()
        except Exception as e:  # surfaced via self.errors in tests
            self.errors.append(e)

    def _run_do(self, csp_ch, da_ch):
        try:
            self.do.attach(csp_ch, da_ch)
            self.do.serve()
        except Exception as e:
            self.errors.append(e)

    def encrypt(self, xbar, minmax=False, column=""):
        return self.da.encrypt(xbar, minmax=minmax, column=column)

    def reset_timers(self):
        for e in (self.csp, self.do, self.da):
            e.reset_timers()
        for ch in self.channels:
            ch.wait_ns = 0

    def transcripts(self):
        """Sent-frame byte sequences, one list per directed channel."""
        return {ch.name: list(ch.transcript) for ch in self.channels}

    def close(self):
        for ch in self.channels:
            ch.close()
        for t in self._threads:
            t.join(timeout=5)


class TcpCluster:
    """The three roles over real sockets on localhost, one per thread.

    The owner must reach the server before the analyst does; the
    analyst therefore dials the owner (who is only listening once its
    own server link stands) before dialing the server.
    """

    def __init__(self, state=None, sk=None, params: ProtocolParams = None,
                 seed=None, mac_params=None, owner=None, da_keys=None,
                 ot_group=GROUP_DEFAULT, csp_pool=None, record=False,
                 states=None, host="127.0.0.1"):
        rng = make_rng(seed)
        seeds = [rng.getrandbits(64) for _ in range(3)] if seed is not None \
            else [None, None, None]
        self.csp = CspEngine(state, params, make_rng(seeds[0]), pool=csp_pool,
                             states=states)
        self.do = DoEngine(sk, params, make_rng(seeds[1]),
                           mac_params=mac_params, owner=owner,
                           ot_group=ot_group)
        self.da = DaEngine(params, make_rng(seeds[2]), keys=da_keys,
                           ot_group=ot_group)
        self._record = record
        self.channels = []
        self.errors = []

        csp_srv = transport.tcp_listen(host, 0)
        do_srv = transport.tcp_listen(host, 0)
        csp_port = csp_srv.getsockname()[1]
        do_port = do_srv.getsockname()[1]

        def run_csp():
            try:
                do_ch = transport.tcp_accept(csp_srv, "csp->do")
                da_ch = transport.tcp_accept(csp_srv, "csp->da")
                csp_srv.close()
                self._track(do_ch, da_ch)
                self.csp.attach(do_ch, da_ch)
                self.csp.serve()
            except Exception as e:
                self.errors.append(e)

        def run_do():
            try:
                csp_ch = transport.tcp_connect(host, csp_port, "do->csp")
                da_ch = transport.tcp_accept(do_srv, "do->da")
                do_srv.close()
                self._track(csp_ch, da_ch)
                self.do.attach(csp_ch, da_ch)
                self.do.serve()
            except Exception as e:
                self.errors.append(e)

        self._threads = [threading.Thread(target=run_csp, daemon=True),
                         threading.Thread(target=run_do, daemon=True)]
        for t in self._threads:
            t.start()
        do_ch = transport.tcp_connect(host, do_port, "da->do")
        csp_ch = transport.tcp_connect(host, csp_port, "da->csp")
        self._track(csp_ch, do_ch)
        self.da.attach(csp_ch, do_ch)

    def _track(self, *chs):
        for ch in chs:
            ch.record = self._record
            self.channels.append(ch)

    def encrypt(self, xbar, minmax=False, column=""):
        return self.da.encrypt(xbar, minmax=minmax, column=column)

    def transcripts(self):
        return {ch.name: list(ch.transcript) for ch in self.channels}

    def close(self):
        for ch in self.channels:
            ch.close()
        for t in self._threads:
            t.join(timeout=5)


def build_cluster(dataset, params: ProtocolParams, seed=None,
                  balance=True, integrity_scheme=None, mac_params=None,
                  ot_group=GROUP_DEFAULT, key_rng_seed=None, record=False,
                  pool_size=0, transport_kind="loopback"):
    """Initialize owner state from a dataset and stand up a cluster.

    Returns (cluster, context) where the context keeps the pieces tests
    need for oracle checks: keys, owner state, table, tree.
    """
    from . import integrity as integrity_mod

    rng = make_rng(seed)
    pk, sk = paillier.keygen(params.key_bits,
                             rng=make_rng(key_rng_seed if key_rng_seed
                                          is not None else
                                          (rng.getrandbits(64)
                                           if seed is not None else None)),
                             allow_small=True)
    tagger = None
    if params.integrity != integrity_mod.SCHEME_OFF:
        if mac_params is None:
            raise ValueError("integrity enabled but no MAC parameters given")
        tagger = make_node_tagger(params.integrity, mac_params, pk, rng)
    owner, table, tree = ope_state.init_state(
        dataset, params.m, pk, l=params.l, mode=params.mode, rng=rng,
        balance=balance, tagger=tagger)
    state = ServerState(table=table, tree=tree, pk_owner=pk)
    da_keys = analyst_keygen(params, make_rng(rng.getrandbits(64)
                                              if seed is not None else None)) \
        if params.mode == ope_state.MODE_FH else None
    pool = None
    if pool_size:
        pool = paillier.RandomnessPool(pk)
        pool.fill(pool_size, make_rng(rng.getrandbits(64)
                                      if seed is not None else None))
    kind = TcpCluster if transport_kind == "tcp" else LocalCluster
    cluster = kind(state, sk, params,
                   seed=rng.getrandbits(64) if seed is not None else None,
                   mac_params=mac_params, owner=owner, da_keys=da_keys,
                   ot_group=ot_group, csp_pool=pool, record=record)
    context = {"pk": pk, "sk": sk, "owner": owner, "table": table,
               "tree": tree, "state": state, "da_keys": da_keys}
    return cluster, context
