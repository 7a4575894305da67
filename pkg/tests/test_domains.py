"""Multi-domain compartments: creation, cross-calls, grants, mode check."""
import itertools
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from endosim import PermSet, PolicyDenied
from endosim import transitions as tr
from endosim.domains import CpuMode, MiniCpu, ModeCheckResult, mode_check
from endosim.machine import PAGE_SIZE, PageAttr

from conftest import booted, run_ok


def with_box_pages(state, base=0x200000):
    state, _ = run_ok(
        state, tr.syscall(0, "mmap", addr=base, length=PAGE_SIZE, perms=PermSet.parse("rx"), content=b"")
    )
    state, _ = run_ok(
        state, tr.syscall(0, "mmap", addr=base + PAGE_SIZE, length=PAGE_SIZE, perms=PermSet.parse("rw"))
    )
    return state, base // PAGE_SIZE, base // PAGE_SIZE + 1


def create_box(state, label="box", ring="safebox", base=0x200000, entries=1):
    state, code, data = with_box_pages(state, base)
    state, result = run_ok(
        state,
        tr.syscall(
            0,
            "iv_create_domain",
            label=label,
            ring=ring,
            code_pages=(code,),
            data_pages=(data,),
            entrypoints={i: base + 16 * (i + 1) for i in range(entries)},
        ),
    )
    return state, result.value


class TestCreateDomain:
    def test_first_creation_assigns_index_1_and_rekeys(self, app_state):
        state, idx = create_box(app_state)
        assert idx == 1
        comp = state.domains.compartments[1]
        assert state.pages[0x200].domain.index == 1
        assert state.pages[0x200].attr is PageAttr.EXEC
        assert state.pages[0x201].domain.index == 1
        assert state.pages[0x201].attr is PageAttr.DOMAIN_PRIVATE
        assert state.exec_locked

    def test_trusted_page_rejected(self, app_state):
        from endosim.machine import MONITOR_CODE_PAGE

        out, result = tr.apply_transition(
            app_state,
            tr.syscall(
                0,
                "iv_create_domain",
                code_pages=(MONITOR_CODE_PAGE,),
                data_pages=(),
                entrypoints={0: MONITOR_CODE_PAGE * PAGE_SIZE + 16},
            ),
        )
        assert result.reason == "PageOwnedElsewhere"

    def test_entrypoints_must_lie_in_code_pages(self, app_state):
        state, code, data = with_box_pages(app_state)
        out, result = tr.apply_transition(
            state,
            tr.syscall(
                0, "iv_create_domain", code_pages=(code,), data_pages=(data,), entrypoints={0: 0x999000}
            ),
        )
        assert result.reason == "BadEntrypoint"

    def test_exhaustion_at_fourteen_live_domains(self, app_state):
        # The app occupies one untrusted key; 13 compartments fill the rest,
        # and the attempt at a 15th live domain is rejected.
        state = app_state
        created = 0
        base = 0x200000
        while True:
            out, result = tr.apply_transition(
                state, tr.syscall(0, "mmap", addr=base, length=PAGE_SIZE, perms=PermSet.parse("rw"))
            )
            state = out
            out, result = tr.apply_transition(
                state,
                tr.syscall(
                    0,
                    "iv_create_domain",
                    code_pages=(),
                    data_pages=(base // PAGE_SIZE,),
                    entrypoints={},
                ),
            )
            if result.status is tr.Status.DENIED:
                assert result.reason == "DomainsExhausted"
                break
            state = out
            created += 1
            base += PAGE_SIZE
            assert created < 20, "exhaustion never triggered"
        assert created == 13


class TestXcall:
    def test_switch_and_stack_and_signals_held(self, app_state):
        state, idx = create_box(app_state)
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=idx, entry=0))
        thread = state.threads[0]
        assert thread.current_domain.index == idx
        assert thread.stack_domain.index == idx
        assert thread.sig_blocked
        assert len(thread.return_chain) == 1

    def test_bad_entrypoint_id(self, app_state):
        state, idx = create_box(app_state)
        out, result = tr.apply_transition(state, tr.syscall(0, "xcall", target=idx, entry=999))
        assert result.reason == "BadEntrypoint"

    def test_plain_jump_grants_nothing(self, app_state):
        state, idx = create_box(app_state)
        state, result = run_ok(state, tr.jump_into(0, 0x200010))
        assert result.value == 0  # still the app domain
        out, result = tr.apply_transition(state, tr.read_probe(0, 0x201000))
        assert result.status is tr.Status.FAULT

    def test_lateral_safebox_call_denied(self, app_state):
        state, a = create_box(app_state, label="a", base=0x200000)
        state, b = create_box(state, label="b", base=0x300000)
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=a, entry=0))
        out, result = tr.apply_transition(state, tr.syscall(0, "xcall", target=b, entry=0))
        assert result.reason == "LateralCall"

    def test_arg_slot_limit(self, app_state):
        state, idx = create_box(app_state)
        out, result = tr.apply_transition(state, tr.syscall(0, "xcall", target=idx, entry=0, nargs=7))
        assert result.reason == "ArgLimit"


class TestXreturn:
    def test_round_trip_is_identity(self, app_state):
        state, idx = create_box(app_state)
        before = state.threads[0]
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=idx, entry=0))
        state, _ = run_ok(state, tr.syscall(0, "xreturn"))
        after = state.threads[0]
        assert (after.current_domain, after.stack_domain, after.return_chain) == (
            before.current_domain,
            before.stack_domain,
            before.return_chain,
        )

    def test_round_trip_identity_to_depth_8(self, app_state):
        # Alternate safebox/sandbox compartments so calls keep changing ring.
        state = app_state
        indices = []
        for k in range(8):
            ring = "safebox" if k % 2 == 0 else "sandbox"
            state, idx = create_box(state, label=f"d{k}", ring=ring, base=0x200000 + k * 0x10000)
            indices.append(idx)
        snapshots = [state.threads[0]]
        for depth, idx in enumerate(indices, start=1):
            state, _ = run_ok(state, tr.syscall(0, "xcall", target=idx, entry=0))
            assert len(state.threads[0].return_chain) == depth
            snapshots.append(state.threads[0])
        for depth in range(len(indices), 0, -1):
            state, _ = run_ok(state, tr.syscall(0, "xreturn"))
            expect = snapshots[depth - 1]
            got = state.threads[0]
            assert (got.current_domain, got.stack_domain, got.return_chain) == (
                expect.current_domain,
                expect.stack_domain,
                expect.return_chain,
            )

    def test_out_of_order_return_denied(self, app_state):
        state, a = create_box(app_state, label="a", base=0x200000, ring="safebox")
        state, b = create_box(state, label="b", base=0x300000, ring="sandbox")
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=a, entry=0))
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=b, entry=0))
        # The nested caller is a, yet the return claims the app domain (0).
        out, result = tr.apply_transition(state, tr.syscall(0, "xreturn", claim=0))
        assert result.reason == "ReturnOrder"

    def test_empty_chain_denied(self, app_state):
        out, result = tr.apply_transition(app_state, tr.syscall(0, "xreturn"))
        assert result.reason == "ReturnOrder"


class TestGrantRevoke:
    def _setup(self, app_state):
        state, idx = create_box(app_state, ring="sandbox")
        state, _ = run_ok(
            state, tr.syscall(0, "mmap", addr=0x400000, length=PAGE_SIZE, perms=PermSet.parse("rw"))
        )
        return state, idx

    def test_grant_run_revoke_cycle(self, app_state):
        state, idx = self._setup(app_state)
        state, _ = run_ok(state, tr.syscall(0, "iv_grant", page=0x400, grantee=idx))
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=idx, entry=0))
        state, result = run_ok(state, tr.read_probe(0, 0x400000))
        state, _ = run_ok(state, tr.syscall(0, "xreturn"))
        state, _ = run_ok(state, tr.syscall(0, "iv_revoke", page=0x400))
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=idx, entry=0))
        out, result = tr.apply_transition(state, tr.read_probe(0, 0x400000))
        assert result.status is tr.Status.FAULT  # access fully gone

    def test_grant_requires_ownership(self, app_state):
        state, idx = self._setup(app_state)
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=idx, entry=0))
        # The sandbox tries to grant a page it does not own.
        out, result = tr.apply_transition(state, tr.syscall(0, "iv_grant", page=0x400, grantee=0))
        assert result.reason == "NotOwner"

    def test_upward_grant_denied(self, app_state):
        state, idx = create_box(app_state, ring="safebox")
        state, _ = run_ok(
            state, tr.syscall(0, "mmap", addr=0x400000, length=PAGE_SIZE, perms=PermSet.parse("rw"))
        )
        out, result = tr.apply_transition(state, tr.syscall(0, "iv_grant", page=0x400, grantee=idx))
        assert result.reason == "UpwardGrant"

    def test_double_revoke_is_noop_success(self, app_state):
        # Oracle: state equality between the first and second revoke results.
        state, idx = self._setup(app_state)
        state, _ = run_ok(state, tr.syscall(0, "iv_grant", page=0x400, grantee=idx))
        state, _ = run_ok(state, tr.syscall(0, "iv_revoke", page=0x400))
        once = state.domains
        state, result = run_ok(state, tr.syscall(0, "iv_revoke", page=0x400))
        assert result.ok
        assert state.domains == once

    def test_revoked_sandbox_never_regains_access(self, app_state):
        # Bounded search over grant/revoke/xcall sequences: after the final
        # revoke, no sequence leaves the sandbox with access.
        state, idx = self._setup(app_state)
        ops = ("grant", "revoke", "xcall_probe")
        for seq in itertools.product(ops, repeat=3):
            s = state
            for op in seq:
                if op == "grant":
                    s, _ = tr.apply_transition(s, tr.syscall(0, "iv_grant", page=0x400, grantee=idx))
                elif op == "revoke":
                    s, _ = tr.apply_transition(s, tr.syscall(0, "iv_revoke", page=0x400))
            s, _ = tr.apply_transition(s, tr.syscall(0, "iv_revoke", page=0x400))
            s, _ = run_ok(s, tr.syscall(0, "xcall", target=idx, entry=0))
            out, result = tr.apply_transition(s, tr.read_probe(0, 0x400000))
            assert result.status is tr.Status.FAULT, seq


class TestIsolateLibrary:
    def test_exports_become_entrypoints_with_stubs(self, app_state):
        state, code, data = with_box_pages(app_state)
        exports = tuple(0x200000 + 16 * (i + 1) for i in range(3))
        state, result = run_ok(
            state,
            tr.syscall(
                0, "iv_isolate_library", label="ssl", code_pages=(code,), data_pages=(data,), exports=exports
            ),
        )
        comp = state.domains.compartments[result.value]
        assert len(comp.entrypoints) == 3
        assert len(comp.stubs) == 3
        assert comp.ring.name == "SAFEBOX"

    def test_internal_symbol_not_callable(self, app_state):
        state, code, data = with_box_pages(app_state)
        exports = (0x200010,)
        state, result = run_ok(
            state,
            tr.syscall(
                0, "iv_isolate_library", label="ssl", code_pages=(code,), data_pages=(data,), exports=exports
            ),
        )
        out, res = tr.apply_transition(state, tr.syscall(0, "xcall", target=result.value, entry=5))
        assert res.reason == "BadEntrypoint"

    def test_callback_runs_at_library_privilege(self, app_state):
        state, code, data = with_box_pages(app_state)
        state, result = run_ok(
            state,
            tr.syscall(
                0,
                "iv_isolate_library",
                label="ssl",
                code_pages=(code,),
                data_pages=(data,),
                exports=(0x200010,),
            ),
        )
        state, _ = run_ok(state, tr.syscall(0, "xcall", target=result.value, entry=0))
        # The library calls back into app code: a plain jump, no transition.
        state, res = run_ok(state, tr.jump_into(0, state.user_stack_addr(0)))
        assert res.value == result.value  # current domain is still the library


def _mode_check_oracle(rax: int, mode: CpuMode) -> tuple[int, bool]:
    """Independent instruction-by-instruction emulation of the check sequence."""
    mask64 = (1 << 64) - 1
    mask32 = (1 << 32) - 1
    if mode is CpuMode.LONG64:
        v = (rax << 1) & mask64
        v = (v + 1) & mask64
        cf = bool(v & 1)
        trap = not cf
        if not trap:
            v >>= 1
        return v, trap
    v = rax & mask32
    v = (v - 1) & mask32  # REX prefix decoded as dec eax
    v = (v << 1) & mask32
    v = (v - 1) & mask32
    v = (v + 1) & mask32
    cf = bool(v & 1)
    return v, not cf


class TestModeCheck:
    def test_spec_example_long64_rax5(self):
        cpu, res = mode_check(MiniCpu(rax=0x5))
        assert res is ModeCheckResult.PASS
        assert cpu.rax == 0x5

    def test_spec_example_long64_rax0(self):
        cpu, res = mode_check(MiniCpu(rax=0x0))
        assert res is ModeCheckResult.PASS
        assert cpu.rax == 0x0

    def test_spec_example_compat32_traps(self):
        cpu, res = mode_check(MiniCpu(rax=0x5, mode=CpuMode.COMPAT32))
        assert res is ModeCheckResult.INVALID_OPCODE_TRAP

    @given(st.integers(0, (1 << 32) - 1))
    @settings(max_examples=300, deadline=None)
    def test_against_hand_stepped_oracle(self, rax):
        for mode in (CpuMode.LONG64, CpuMode.COMPAT32):
            cpu, res = mode_check(MiniCpu(rax=rax, mode=mode))
            expect_rax, expect_trap = _mode_check_oracle(rax, mode)
            assert (res is ModeCheckResult.INVALID_OPCODE_TRAP) == expect_trap
            assert cpu.rax == expect_rax

    def test_large_sample_pass_and_preserve(self):
        rng = random.Random(0)
        samples = [rng.randrange(1 << 32) for _ in range(2048)]
        for rax in samples:
            cpu, res = mode_check(MiniCpu(rax=rax))
            assert res is ModeCheckResult.PASS and cpu.rax == rax
            cpu, res = mode_check(MiniCpu(rax=rax, mode=CpuMode.COMPAT32))
            assert res is ModeCheckResult.INVALID_OPCODE_TRAP
