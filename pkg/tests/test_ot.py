"""Oblivious transfer: base OT, IKNP extension, derandomized transfers."""

import queue
import threading

import pytest

from oope import ot
from oope.errors import ProtocolError
from oope.rng import make_rng


def pipe_pair():
    a, b = queue.Queue(), queue.Queue()
    return (b.put, a.get), (a.put, b.get)


def run_base_ot(messages, bits, group):
    (s_send, s_recv), (r_send, r_recv) = pipe_pair()
    out = {}

    def recv_side():
        out["m"] = ot.base_ot_recv(r_send, r_recv, bits, group, make_rng(2))

    t = threading.Thread(target=recv_side)
    t.start()
    ot.base_ot_send(s_send, s_recv, messages, group, make_rng(1))
    t.join()
    return out["m"]


def test_base_ot_selects_correctly():
    rng = make_rng(5)
    msgs = [(rng.getrandbits(256).to_bytes(32, "big"),
             rng.getrandbits(256).to_bytes(32, "big")) for _ in range(8)]
    bits = [0, 1, 1, 0, 1, 0, 0, 1]
    got = run_base_ot(msgs, bits, ot.GROUP_TEST)
    assert got == [m[b] for m, b in zip(msgs, bits)]


def test_ot_exchange_all_zero_choices():
    rng = make_rng(7)
    pairs = [(rng.getrandbits(128).to_bytes(16, "big"),
              rng.getrandbits(128).to_bytes(16, "big")) for _ in range(10)]
    got = ot.ot_exchange(pairs, [0] * 10, make_rng(1), ot.GROUP_TEST)
    assert got == [p[0] for p in pairs]


def test_ot_exchange_random_choices_16():
    rng = make_rng(11)
    pairs = [(rng.getrandbits(128).to_bytes(16, "big"),
              rng.getrandbits(128).to_bytes(16, "big")) for _ in range(16)]
    bits = [rng.getrandbits(1) for _ in range(16)]
    got = ot.ot_exchange(pairs, bits, make_rng(2), ot.GROUP_TEST)
    assert got == [p[b] for p, b in zip(pairs, bits)]


def test_ot_exchange_length_mismatch():
    with pytest.raises(ProtocolError):
        ot.ot_exchange([(b"0" * 16, b"1" * 16)], [0, 1], make_rng(0),
                       ot.GROUP_TEST)


def test_extension_survives_multiple_batches():
    # force several small extension batches over one base-OT setup
    (s_send, s_recv), (r_send, r_recv) = pipe_pair()
    sender = ot.OtExtSender(s_send, s_recv, make_rng(1), ot.GROUP_TEST, batch=8)
    receiver = ot.OtExtReceiver(r_send, r_recv, make_rng(2), ot.GROUP_TEST,
                                batch=8)
    rng = make_rng(3)
    rounds = []
    for _ in range(5):
        pairs = [(rng.getrandbits(128).to_bytes(16, "big"),
                  rng.getrandbits(128).to_bytes(16, "big")) for _ in range(6)]
        bits = [rng.getrandbits(1) for _ in range(6)]
        rounds.append((pairs, bits))
    got = []

    def recv_side():
        receiver.setup()
        for _, bits in rounds:
            got.append(receiver.receive_pairs(bits))

    t = threading.Thread(target=recv_side)
    t.start()
    sender.setup()
    for pairs, _ in rounds:
        sender.send_pairs(pairs)
    t.join()
    for (pairs, bits), labels in zip(rounds, got):
        assert labels == [p[b] for p, b in zip(pairs, bits)]


def test_receiver_cannot_use_wrong_pad():
    # the non-chosen branch decrypts to garbage, not the other label
    rng = make_rng(13)
    pairs = [(b"\x00" * 16, b"\xff" * 16)]
    got = ot.ot_exchange(pairs, [0], make_rng(4), ot.GROUP_TEST)
    assert got[0] == pairs[0][0]
    assert got[0] != pairs[0][1]


def test_malformed_group_element_rejected():
    group = ot.GROUP_TEST
    with pytest.raises(ProtocolError):
        group.check_member(0)
    with pytest.raises(ProtocolError):
        group.check_member(group.p + 5)
