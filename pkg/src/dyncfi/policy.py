"""Control-transfer policy: allow/deny decisions per transfer kind.

Decision rules, applied over an immutable :class:`ProcessImage` snapshot:

    call   -- the target must be a function defined in the source module
              (known precisely for non-stripped modules, at
              section/export granularity otherwise), an exported function
              the source module imports, or a heuristically admitted
              callback address.
    jump   -- the target must stay inside the source's enclosing function
              (or granule) at a valid instruction, or be an allowed call
              target (tail call).
    return -- the claimed address must match the trusted shadow stack.

Every transfer must land on a known-valid instruction start; failures of
that requirement are reported under rule ``valid-instruction`` regardless
of transfer kind.  Deny verdicts name the violated rule: ``call-import``
for denied inter-module calls, ``call-local`` for denied intra-module
calls, ``jump-intra-function`` / ``jump-tail-call`` likewise for jumps.

``target_set_size`` on a verdict counts the distinct addresses the policy
would have accepted for that transfer, feeding the reduction metric.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .process import (
    GLOBAL_SCOPE,
    PROV_EXPORT_IMPORT,
    PROV_LOCAL_SYMBOL,
    CallbackFinding,
    LoadedModule,
    ProcessImage,
)

ALLOW = "allow"
DENY = "deny"

RULE_CALL_IMPORT = "call-import"
RULE_CALL_LOCAL = "call-local"
RULE_JUMP_INTRA = "jump-intra-function"
RULE_JUMP_TAIL_CALL = "jump-tail-call"
RULE_RETURN_SHADOW = "return-shadow-match"
RULE_CALLBACK = "callback-admitted"
RULE_PLT_DIRECT = "plt-direct"
RULE_VALID_INSTRUCTION = "valid-instruction"

PATTERN_PUSH_IMM32 = "push-imm32"
PATTERN_MOV_IMM32 = "mov-imm32-to-stack-slot"
PATTERN_LEA_EBX = "lea-ebx-relative"
PATTERN_RELATIVE_RELOC = "relative-relocation"
PATTERN_DATA_SCAN = "data-scan"


@dataclass(frozen=True)
class Verdict:
    decision: str
    rule: str
    reason: str
    target_set_size: int

    @property
    def allowed(self) -> bool:
        return self.decision == ALLOW


class FastPathCache:
    """Verified {source module, destination, kind} pairs, epoch-bound.

    Entries survive only while the process-image epoch is unchanged; any
    load/unload/callback admission drops the whole cache.
    """

    def __init__(self) -> None:
        self._entries: dict[tuple[str, int, str], Verdict] = {}
        self.bound_epoch: int | None = None
        self.hits = 0
        self.misses = 0

    def _sync(self, epoch: int) -> None:
        if self.bound_epoch != epoch:
            self._entries.clear()
            self.bound_epoch = epoch

    def lookup(self, key: tuple[str, int, str], epoch: int) -> Verdict | None:
        self._sync(epoch)
        verdict = self._entries.get(key)
        if verdict is None:
            self.misses += 1
        else:
            self.hits += 1
        return verdict

    def insert(self, key: tuple[str, int, str], epoch: int, verdict: Verdict) -> None:
        self._sync(epoch)
        self._entries[key] = verdict

    def __len__(self) -> int:
        return len(self._entries)


def check_call(p: ProcessImage, cache: FastPathCache | None,
               src: int, dst: int, *, indirect: bool = True) -> Verdict:
    """Validate a call transfer; the caller guarantees src is mapped."""
    src_mod = p.exec_module_at(src)
    assert src_mod is not None, "caller must reject unmapped sources"
    key = (src_mod.module_id, dst, "call")
    if cache is not None:
        hit = cache.lookup(key, p.epoch)
        if hit is not None:
            return hit

    targets = p.call_target_set(src_mod.module_id)
    size = len(targets)
    dst_mod = p.exec_module_at(dst)

    if dst_mod is None or not dst_mod.is_instruction(dst):
        where = "outside loaded modules" if dst_mod is None else "mid-instruction"
        return Verdict(DENY, RULE_VALID_INSTRUCTION,
                       f"call target {hex(dst)} is {where}", size)

    if dst in targets:
        rule, reason = _allow_rule(p, src_mod, dst_mod, dst)
        verdict = Verdict(ALLOW, rule, reason, size)
        if cache is not None:
            cache.insert(key, p.epoch, verdict)
        return verdict

    if dst_mod.module_id == src_mod.module_id:
        return Verdict(DENY, RULE_CALL_LOCAL,
                       f"{hex(dst)} is not a known function of "
                       f"{src_mod.module_id}", size)
    return Verdict(DENY, RULE_CALL_IMPORT,
                   f"{src_mod.module_id} does not import a function at "
                   f"{hex(dst)} from {dst_mod.module_id}", size)


def _allow_rule(p: ProcessImage, src_mod: LoadedModule,
                dst_mod: LoadedModule, dst: int) -> tuple[str, str]:
    """Name the rule admitting dst; local beats import beats callback."""
    scopes = p.table.scopes(dst)
    own = scopes.get(src_mod.module_id, set())
    if PROV_LOCAL_SYMBOL in own and dst_mod.module_id == src_mod.module_id:
        how = ("section-granularity target" if src_mod.module.stripped
               else "function defined in module")
        return RULE_CALL_LOCAL, f"{how} at {hex(dst)}"
    if PROV_EXPORT_IMPORT in own:
        return RULE_CALL_IMPORT, (
            f"imported export of {dst_mod.module_id} at {hex(dst)}")
    if GLOBAL_SCOPE in scopes:
        return RULE_CALLBACK, f"callback address {hex(dst)}"
    if any(tgt == dst and mid == src_mod.module_id
           for (mid, _plt), tgt in p.plt_resolutions.items()):
        return RULE_PLT_DIRECT, f"PLT-resolved target {hex(dst)}"
    return RULE_CALL_IMPORT, f"allowlisted target {hex(dst)}"


def check_jump(p: ProcessImage, cache: FastPathCache | None,
               src: int, dst: int) -> Verdict:
    """Validate a jump transfer (intra-function or tail call).

    ``cache`` is accepted for signature symmetry but never consulted: a
    jump verdict depends on the source's enclosing function, so entries
    keyed by (module, destination) would conflate sources with different
    extents.
    """
    src_mod = p.exec_module_at(src)
    assert src_mod is not None, "caller must reject unmapped sources"

    extent = p.function_extent(src)
    extent_instrs: set[int] = set()
    if extent is not None:
        extent_instrs = set(src_mod.instructions_in(extent[0], extent[1]))
    call_targets = p.call_target_set(src_mod.module_id)
    size = len(extent_instrs | call_targets)

    dst_mod = p.exec_module_at(dst)
    dst_valid = dst_mod is not None and dst_mod.is_instruction(dst)

    if extent is not None and extent[0] <= dst < extent[1] and dst_valid:
        return Verdict(ALLOW, RULE_JUMP_INTRA,
                       f"{hex(dst)} within function "
                       f"[{hex(extent[0])},{hex(extent[1])})", size)
    if dst_valid and dst in call_targets:
        return Verdict(ALLOW, RULE_JUMP_TAIL_CALL,
                       f"tail call to allowed target {hex(dst)}", size)

    if not dst_valid:
        where = "outside loaded modules" if dst_mod is None else "mid-instruction"
        return Verdict(DENY, RULE_VALID_INSTRUCTION,
                       f"jump target {hex(dst)} is {where}", size)
    if dst_mod.module_id == src_mod.module_id:
        return Verdict(DENY, RULE_JUMP_INTRA,
                       f"{hex(dst)} escapes the enclosing function and is "
                       f"not a call target", size)
    return Verdict(DENY, RULE_JUMP_TAIL_CALL,
                   f"{hex(dst)} in {dst_mod.module_id} is not an allowed "
                   f"tail-call target", size)


def check_return(shadow, claimed: int) -> Verdict:
    """Validate a return against the shadow stack (delegation)."""
    return shadow.pop_and_check(claimed)


# ---------------------------------------------------------------------------
# Callback detection heuristics
# ---------------------------------------------------------------------------

def scan_callbacks(p: ProcessImage, lm: LoadedModule) -> list[CallbackFinding]:
    """Scan one loaded module for function-pointer creation patterns.

    Byte patterns over executable sections (x86-32 encodings):
        push-imm32               68 <imm32>
        mov-imm32-to-stack-slot  c7 44 24 <disp8> <imm32>
                                 c7 84 24 <disp32> <imm32>
        lea-ebx-relative         8d /r with mod=10 rm=ebx: <disp32>,
                                 resolved against the module's .got.plt
    plus relative relocations (resolved value = base + addend) and a scan
    of .data for words pointing into executable ranges.

    A candidate is admitted only when the resolved value is a known-valid
    instruction start in some loaded module, so every finding is sound by
    construction.
    """
    findings: dict[tuple[int, str], CallbackFinding] = {}

    def admit(value: int, pattern: str) -> None:
        if p.is_instruction(value):
            findings.setdefault(
                (value, pattern),
                CallbackFinding(address=value, pattern=pattern,
                                source_module=lm.module_id))

    gotplt = lm.module.section(".got.plt")

    for section in lm.module.executable_sections():
        data = section.data
        n = len(data)
        for i in range(n):
            b = data[i]
            if b == 0x68 and i + 5 <= n:
                admit(struct.unpack_from("<I", data, i + 1)[0],
                      PATTERN_PUSH_IMM32)
            elif b == 0xC7 and i + 3 <= n:
                modrm, sib = data[i + 1], data[i + 2]
                if modrm == 0x44 and sib == 0x24 and i + 8 <= n:
                    admit(struct.unpack_from("<I", data, i + 4)[0],
                          PATTERN_MOV_IMM32)
                elif modrm == 0x84 and sib == 0x24 and i + 11 <= n:
                    admit(struct.unpack_from("<I", data, i + 7)[0],
                          PATTERN_MOV_IMM32)
            elif b == 0x8D and i + 6 <= n and gotplt is not None:
                modrm = data[i + 1]
                if (modrm & 0xC7) == 0x83:  # mod=10, rm=ebx
                    disp = struct.unpack_from("<i", data, i + 2)[0]
                    admit(lm.base + gotplt.virtual_offset + disp,
                          PATTERN_LEA_EBX)

    for reloc in lm.module.relocations:
        if reloc.kind == "relative":
            # 32-bit wraparound: the stored addend is an unsigned word.
            admit((lm.base + reloc.addend) & 0xFFFFFFFF, PATTERN_RELATIVE_RELOC)

    data_section = lm.module.section(".data")
    if data_section is not None and data_section.data:
        raw = data_section.data
        for off in range(0, len(raw) - 3, 4):
            admit(struct.unpack_from("<I", raw, off)[0], PATTERN_DATA_SCAN)

    return list(findings.values())
