import numpy as np
import pytest

from bvib.consensus import AbortSignal, Cluster, EventLog, Role, TermConfig, quorum, start_election
from bvib.errors import AuthorizationError, TotalFailure
from bvib.ledger_chain import Block, LedgerEntry, validate_chain


def cluster(n=10, seed=0, **term):
    c = Cluster(n, TermConfig(**term) if term else None, np.random.default_rng(seed))
    c.bootstrap(0)
    return c


def fill(c, batch, epoch=0):
    for node in c.nodes:
        c.record(node.node_id, LedgerEntry(epoch, batch, node.node_id, 1.0 + batch, -0.5, batch + 1))


class TestElection:
    def test_single_candidate(self):
        winner, votes = start_election([3], np.random.default_rng(0))
        assert winner == 3 and votes[3] == 1

    def test_seeded_trace(self):
        # independent replay of the two draws for seed 0
        replay = np.random.default_rng(0)
        assert [int(replay.integers(2)) for _ in range(2)] == [1, 1]
        winner, votes = start_election([0, 1], np.random.default_rng(0))
        assert winner == 1 and votes[1] == 2

    def test_tie_goes_to_lowest_id(self):
        def draws(s):
            g = np.random.default_rng(s)
            return [int(g.integers(2)) for _ in range(2)]

        seed = next(s for s in range(100) if draws(s) == [0, 1])
        winner, votes = start_election([0, 1], np.random.default_rng(seed))
        assert votes[0] == votes[1] == 1 and winner == 0

    def test_no_candidates(self):
        with pytest.raises(TotalFailure):
            start_election([], np.random.default_rng(0))

    def test_plurality_against_replay(self):
        for seed in range(20):
            ids = [0, 2, 3, 5, 8]
            replay = np.random.default_rng(seed)
            counts = {i: 0 for i in ids}
            for _ in ids:
                counts[ids[int(replay.integers(len(ids)))]] += 1
            best = max(counts.values())
            expected = min(i for i, v in counts.items() if v == best)
            assert start_election(ids, np.random.default_rng(seed))[0] == expected

    def test_elect_assigns_roles_and_term(self):
        c = cluster(5)
        assert c.term_number == 1
        leaders = [n for n in c.nodes if n.role is Role.LEADER]
        assert len(leaders) == 1 and leaders[0].node_id == c.leader_id
        assert all(n.current_term == 1 for n in c.nodes)

    def test_all_paralyzed_is_total_failure(self):
        c = cluster(3)
        for i in range(3):
            c.set_alive(i, False, 1)
        with pytest.raises(TotalFailure):
            c.elect(1, "test")
        assert c.log.count("TOTAL_FAILURE") == 1


def test_quorum_rule():
    assert [quorum(f) for f in (0, 1, 2, 3, 8, 9)] == [0, 1, 2, 2, 5, 5]


def test_genesis_on_bootstrap():
    c = cluster(4)
    assert all(n.chain.height == 1 and validate_chain(n.chain) is None for n in c.nodes)
    assert c.log.count("ELECTION") == 1 and c.log.count("COMMIT") == 1


class TestHeartbeat:
    def test_alive_leader_resets_counters(self):
        c = cluster(4)
        for f in c.followers():
            f.missed_heartbeats = 2
        assert not c.heartbeat_tick(1)
        assert all(f.missed_heartbeats == 0 for f in c.followers())

    def test_paralyzed_leader_triggers_one_election(self):
        c = cluster(10, missed_heartbeat_threshold=3)
        old = c.leader_id
        c.set_alive(old, False, 1)
        fired = [c.heartbeat_tick(r) for r in range(1, 4)]
        assert fired == [False, False, True]
        assert c.elections == 2 and c.leader_id != old and c.nodes[c.leader_id].alive
        # the new leader keeps things quiet afterwards
        assert not any(c.heartbeat_tick(r) for r in range(4, 20))
        assert c.elections == 2

    def test_training_resumes_after_reelection(self):
        c = cluster(10)
        c.set_alive(c.leader_id, False, 1)
        assert c.collect_and_commit(1) is None
        for r in range(1, 4):
            c.heartbeat_tick(r)
        fill(c, 1)
        block = c.collect_and_commit(4)
        assert isinstance(block, Block) and block.index == 1

    def test_term_expiry_reelects(self):
        c = cluster(5, term_length=10)
        fired = [r for r in range(1, 25) if c.heartbeat_tick(r)]
        assert fired == [10, 20]
        assert c.log.of_kind("ELECTION")[-1].endswith("reason=term")


class TestCommit:
    def test_five_of_nine_commits(self):
        c = cluster(10)
        down = [f.node_id for f in c.followers()][:4]
        for nid in down:
            c.set_alive(nid, False, 1)
        fill(c, 0)
        out = c.collect_and_commit(1)
        assert isinstance(out, Block)
        assert len(out.entries) == 6
        assert c.aborts == 0

    def test_four_of_nine_aborts(self):
        c = cluster(10)
        down = [f.node_id for f in c.followers()][:5]
        for nid in down:
            c.set_alive(nid, False, 1)
        fill(c, 0)
        out = c.collect_and_commit(1)
        assert isinstance(out, AbortSignal)
        assert (out.received, out.quorum, len(out.discarded)) == (4, 5, 5)
        assert c.elections == 2 and c.log.count("ABORT") == 1
        assert all(not n.pending for n in c.nodes)
        committed = {e.key for n in c.nodes for e in n.chain.entries()}
        assert not committed & {e.key for e in out.discarded}

    def test_aborted_entries_never_committed_later(self):
        c = cluster(10, seed=3)
        for nid in [f.node_id for f in c.followers()][:5]:
            c.set_alive(nid, False, 1)
        fill(c, 0)
        aborted = c.collect_and_commit(1)
        for nid in range(10):
            c.set_alive(nid, True, 2)
        fill(c, 1)
        assert isinstance(c.collect_and_commit(2), Block)
        keys = {e.key for e in c.chain.entries()}
        assert not keys & {e.key for e in aborted.discarded}

    def test_single_server_commits_alone(self):
        c = cluster(1)
        c.record(0, LedgerEntry(0, 0, 0, 1.0, -1.0, 1))
        assert isinstance(c.collect_and_commit(1), Block)

    def test_only_leader_commits(self):
        c = cluster(3)
        other = next(n.node_id for n in c.nodes if n.node_id != c.leader_id)
        with pytest.raises(AuthorizationError):
            c.collect_and_commit(1, caller=other)

    def test_replication_and_recovery_sync(self):
        c = cluster(5)
        lagging = c.followers()[0].node_id
        c.set_alive(lagging, False, 1)
        for b in range(3):
            fill(c, b)
            c.collect_and_commit(b + 1)
        assert c.nodes[lagging].chain.height == 1
        c.set_alive(lagging, True, 5)
        assert all(n.chain == c.chain for n in c.nodes) and c.chain.height == 4

    def test_liveness_height_grows_per_round(self):
        c = cluster(9, seed=5)
        for nid in [f.node_id for f in c.followers()][:3]:
            c.set_alive(nid, False, 1)
        for r in range(1, 8):
            fill(c, r)
            c.collect_and_commit(r)
            assert c.chain.height == r + 1


def test_safety_single_leader_under_random_faults():
    rng = np.random.default_rng(77)
    c = cluster(7, seed=77, term_length=13)
    for r in range(1, 300):
        for nid in range(7):
            if rng.random() < 0.1:
                c.set_alive(nid, not c.nodes[nid].alive, r)
        if not c.alive_ids():
            c.set_alive(0, True, r)
        c.heartbeat_tick(r)
        assert len(c.alive_leaders()) <= 1
        if c.leader is not None and c.leader.alive:
            fill(c, r)
            c.collect_and_commit(r)
        assert len(c.alive_leaders()) <= 1
    for n in c.nodes:
        assert validate_chain(n.chain) is None


def test_reconcile_all_repairs_a_tampered_copy():
    c = cluster(5)
    fill(c, 0)
    c.collect_and_commit(1)
    good = c.chain.copy()
    victim = c.followers()[0]
    victim.chain.blocks[1] = Block(1, good[0].hash, 99, 1, good[1].entries, good[1].hash)
    assert c.reconcile_all(2) == good
    assert victim.chain == good and c.log.count("RECONCILE") == 1


def test_event_log_format(tmp_path):
    log = EventLog()
    log.emit(3, "PARALYZE", node="S2")
    assert log.lines == ["round=3 PARALYZE node=S2"]
    log.write(tmp_path / "events.log")
    assert (tmp_path / "events.log").read_text() == "round=3 PARALYZE node=S2\n"
