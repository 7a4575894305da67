"""Formal state machine: initial state, safety predicates, commit protocol."""
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endosim import (
    APP_DOMAIN,
    TRUSTED,
    DomainId,
    PermSet,
    SafetyProperty,
    new_initial,
    safety_check,
    start_user,
    default_config,
)
from endosim import transitions as tr
from endosim.machine import (
    FileMappingRecord,
    MachineState,
    PageAttr,
    PageRecord,
    page_of,
    page_span,
)

from conftest import booted, run_ok


class TestInitialState:
    def test_nothing_opened_or_mapped(self):
        state = new_initial()
        assert len(state.open_files) == 0
        assert len(state.file_mappings) == 0

    def test_initial_state_is_safe(self):
        assert safety_check(new_initial()).violations == ()

    def test_single_trusted_thread_in_monitor(self):
        state = new_initial()
        assert set(state.threads) == {0}
        thread = state.threads[0]
        assert thread.current_domain.is_trusted
        assert thread.in_monitor

    def test_monitor_pages_present_and_trusted(self):
        state = new_initial()
        trusted_pages = [p for p, r in state.pages.items() if r.domain.is_trusted]
        assert trusted_pages

    def test_thread0_pkru_grants_all_domains(self):
        state = new_initial()
        pkru = state.threads[0].pkru
        for domain, (read, write) in pkru.items():
            assert read and write
        assert TRUSTED in pkru and APP_DOMAIN in pkru


class TestSafetyPredicates:
    def test_sp1_direct_instantiation(self, app_state):
        # A trusted readable page plus an untrusted thread whose PKRU grants
        # read on the trusted domain.
        thread = app_state.threads[0]
        bad = thread.__class__(
            tid=0,
            current_domain=APP_DOMAIN,
            pkru={TRUSTED: (True, False), APP_DOMAIN: (True, True)},
        )
        state = app_state.with_thread(bad)
        props = [v.prop for v in safety_check(state).violations]
        assert SafetyProperty.TRUSTED_READABLE in props
        assert SafetyProperty.TRUSTED_WRITABLE not in props

    def test_sp2_direct_instantiation(self, app_state):
        thread = app_state.threads[0]
        bad = thread.__class__(
            tid=0,
            current_domain=APP_DOMAIN,
            pkru={TRUSTED: (False, True), APP_DOMAIN: (True, True)},
        )
        state = app_state.with_thread(bad)
        props = [v.prop for v in safety_check(state).violations]
        assert SafetyProperty.TRUSTED_WRITABLE in props

    def test_sp3_flags_writable_executable_page(self, app_state):
        state = app_state.with_pages(
            {0x900: PageRecord(APP_DOMAIN, PermSet(r=True, w=True, x=True), PageAttr.RETIRED)}
        )
        props = [v.prop for v in safety_check(state).violations]
        assert props == [SafetyProperty.WRITE_EXEC]

    def test_sp4_cross_domain_alias(self, app_state):
        # Two mappings of fd 3 with intersecting [off, off+len) in different
        # domains: [0, 8192) in the app domain, [4096, 12288) trusted.
        state = app_state.with_pages(
            {
                0x900: PageRecord(APP_DOMAIN, PermSet(r=True), PageAttr.RETIRED, backing=(7, 0)),
                0x901: PageRecord(TRUSTED, PermSet(r=True), PageAttr.RETIRED, backing=(7, 4096)),
            }
        )
        state = state.evolve(
            file_mappings=(
                FileMappingRecord(fd=3, off=0, length=8192, addr=0x900000),
                FileMappingRecord(fd=3, off=4096, length=8192, addr=0x901000),
            ),
            closed_mapped_fds=frozenset({3}),
        )
        props = [v.prop for v in safety_check(state).violations]
        assert SafetyProperty.ALIASED_MAPPING in props

    def test_sp4_requires_offset_intersection(self, app_state):
        state = app_state.with_pages(
            {
                0x900: PageRecord(APP_DOMAIN, PermSet(r=True), PageAttr.RETIRED, backing=(7, 0)),
                0x901: PageRecord(TRUSTED, PermSet(r=True), PageAttr.RETIRED, backing=(7, 8192)),
            }
        )
        state = state.evolve(
            file_mappings=(
                FileMappingRecord(fd=3, off=0, length=4096, addr=0x900000),
                FileMappingRecord(fd=3, off=8192, length=4096, addr=0x901000),
            ),
            closed_mapped_fds=frozenset({3}),
        )
        assert safety_check(state).safe

    @given(
        off_a=st.integers(0, 5) , len_a=st.integers(1, 4), off_b=st.integers(0, 5), len_b=st.integers(1, 4)
    )
    @settings(max_examples=200, deadline=None)
    def test_sp4_symmetric_under_record_order(self, off_a, len_a, off_b, len_b):
        state = booted()
        page = 4096
        state = state.with_pages(
            {
                0x900: PageRecord(APP_DOMAIN, PermSet(r=True), PageAttr.RETIRED, backing=(7, 0)),
                0x901: PageRecord(TRUSTED, PermSet(r=True), PageAttr.RETIRED, backing=(7, 0)),
            }
        )
        rec_a = FileMappingRecord(fd=3, off=off_a * page, length=len_a * page, addr=0x900000)
        rec_b = FileMappingRecord(fd=3, off=off_b * page, length=len_b * page, addr=0x901000)
        fwd = state.evolve(file_mappings=(rec_a, rec_b), closed_mapped_fds=frozenset({3}))
        rev = state.evolve(file_mappings=(rec_b, rec_a), closed_mapped_fds=frozenset({3}))
        assert safety_check(fwd).safe == safety_check(rev).safe


class TestApplyTransition:
    def test_noop_returns_identical_state(self, app_state):
        state, result = tr.apply_transition(app_state, tr.noop())
        assert state is app_state
        assert result.ok

    def test_denied_wx_mprotect_cites_policy(self, app_state):
        state, _ = run_ok(app_state, tr.syscall(0, "mmap", addr=0x200000, length=4096, perms=PermSet.parse("rw")))
        out, result = tr.apply_transition(
            state, tr.syscall(0, "mprotect", addr=0x200000, length=4096, perms=PermSet.parse("rwx"))
        )
        assert out is state
        assert result.status is tr.Status.DENIED
        assert result.reason == "WXViolation"

    def test_open_state_delta_matches_hand_enumeration(self, app_state):
        # Oracle: enumerate the six state components by hand against the
        # open-file definition. Only the open-file table, fd counter, and the
        # filesystem may change.
        before = app_state
        after, result = run_ok(before, tr.syscall(0, "open", path="/tmp/a"))
        assert result.value == 3
        assert set(after.open_files) == {3}
        of = after.open_files[3]
        assert (of.fd, of.path, of.offset, of.sensitive) == (3, "/tmp/a", 0, False)
        assert of.inode == before.fs.next_inode  # fresh synthetic inode
        assert after.next_fd == before.next_fd + 1
        assert after.fs.paths["/tmp/a"] == of.inode
        # Unchanged components:
        assert after.pages == before.pages
        assert after.file_mappings == before.file_mappings
        assert after.threads == before.threads
        assert after.fs.sensitive_inodes == before.fs.sensitive_inodes

    def test_totality_over_random_transitions(self, app_state):
        rng = random.Random(99)
        candidates = [
            tr.noop(),
            tr.syscall(0, "open", path="/tmp/x"),
            tr.syscall(0, "open", path="/proc/self/mem"),
            tr.syscall(0, "ptrace"),
            tr.syscall(0, "bogus_name"),
            tr.syscall(0, "mmap", length=4096, perms=PermSet.parse("rwx")),
            tr.probe_jump(0, 0x1000),
            tr.read_probe(0, 0x100000),
        ]
        state = app_state
        for _ in range(100):
            t = rng.choice(candidates)
            out, result = tr.try_transition(state, t)
            assert result == "SafetyBreach" or result.status in (
                tr.Status.OK,
                tr.Status.DENIED,
                tr.Status.FAULT,
                tr.Status.BYPASS,
            )
            if result != "SafetyBreach" and result.status is not tr.Status.OK:
                assert out is state
            state = out


class TestRunTrace:
    def test_empty_trace(self, app_state):
        report = tr.run_trace(app_state, [])
        assert report.final_state is app_state
        assert report.denial_count == 0
        assert not report.breach

    def test_sensitive_open_denied_and_state_kept(self, app_state):
        report = tr.run_trace(app_state, [tr.syscall(0, "open", path="/proc/self/mem")])
        assert report.denial_count == 1
        assert report.final_state is app_state

    def test_random_trace_never_breaches(self):
        # Fuzz harness with a seeded PRNG; the oracle is the safety check the
        # commit protocol runs after every step.
        from endosim.fuzz import run_fuzz_trace

        stats = run_fuzz_trace(seed=424242, syscalls_per_trace=100)
        assert stats.breaches == 0
        assert stats.steps == 100


class TestForkTransitivity:
    def test_child_classifies_and_screens_like_parent(self, app_state):
        from endosim.syscalls import classify

        state, result = run_ok(app_state, tr.syscall(0, "fork"))
        child = state.children[0]
        for name in state.config.syscall_table:
            assert classify(child.config, name) == classify(state.config, name)
        assert child.fs.sensitive_inodes == state.fs.sensitive_inodes
        for path in state.fs.paths:
            assert (child.fs.paths[path] in child.fs.sensitive_inodes) == (
                state.fs.paths[path] in state.fs.sensitive_inodes
            )

    def test_child_denies_sensitive_open(self, app_state):
        state, _ = run_ok(app_state, tr.syscall(0, "fork"))
        out, result = tr.apply_transition(
            state, tr.in_child(0, tr.syscall(0, "open", path="/proc/self/mem"))
        )
        assert result.status is tr.Status.DENIED
        assert result.reason == "SensitiveInode"


def test_page_span_half_open():
    assert list(page_span(0, 4096)) == [0]
    assert list(page_span(0, 4097)) == [0, 1]
    assert list(page_span(4095, 2)) == [0, 1]
    assert list(page_span(8192, 0)) == []


def test_states_are_deep_copyable_for_worker_fanout(app_state):
    import copy

    state, _ = run_ok(app_state, tr.syscall(0, "open", path="/tmp/deep"))
    clone = copy.deepcopy(state)
    assert clone == state
    # Divergence after the copy never feeds back.
    clone2, _ = tr.apply_transition(clone, tr.syscall(0, "open", path="/tmp/other"))
    assert "/tmp/other" not in state.fs.paths
