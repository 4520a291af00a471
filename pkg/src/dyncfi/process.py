"""Dynamic process view: loaded modules and the transfer lookup table.

The :class:`ProcessImage` tracks which modules are mapped where, resolves
imports against exporters in load order, and maintains the
:class:`TransferLookupTable` incrementally on load/unload.  The table maps
absolute call-target addresses to the set of source scopes allowed to
transfer there; a scope is a loaded-module id, or ``"*"`` for targets
admitted by callback heuristics (valid from any module).

Target-set construction per source module M:
    - functions defined in M: every known function start if M is not
      stripped; with a stripped module only instruction-level knowledge
      remains, so any known-valid instruction in M's executable sections
      is admitted (verification coarsens to section/export granularity),
    - exported functions of any loaded module whose name M imports,
    - heuristically admitted callback addresses (any scope),
    - configured allowlist entries (extra (module, symbol) grants).

Mutations are serialized by the caller; every mutation bumps ``epoch`` so
downstream caches can invalidate.
"""

from __future__ import annotations

from bisect import bisect_right
from dataclasses import dataclass

from .elf import InstructionMap, ModuleImage
from .errors import ProcessError, ResolutionError

PAGE_SIZE = 4096
GLOBAL_SCOPE = "*"

PROV_EXPORT_IMPORT = "export-import"
PROV_LOCAL_SYMBOL = "local-symbol"
PROV_CALLBACK = "callback-heuristic"
PROV_PLT_RESOLVED = "plt-resolved"


@dataclass(frozen=True)
class LoadedModule:
    """One module mapped at an absolute base address."""

    module: ModuleImage
    base: int
    imap: InstructionMap
    module_id: str

    @property
    def path(self) -> str:
        return self.module.path

    def span(self) -> tuple[int, int]:
        """Absolute [start, end) covering the mapped sections.

        Sections at virtual offset 0 are unmapped metadata (symbol and
        string tables) and do not contribute to the footprint.
        """
        sections = [s for s in self.module.sections
                    if s.size > 0 and s.virtual_offset > 0]
        if not sections:
            return (self.base, self.base)
        lo = min(s.virtual_offset for s in sections)
        hi = max(s.end for s in sections)
        return (self.base + lo, self.base + hi)

    def exec_ranges(self) -> list[tuple[int, int]]:
        return [(self.base + lo, self.base + hi)
                for lo, hi in self.module.executable_ranges()]

    def contains_exec(self, addr: int) -> bool:
        return any(lo <= addr < hi for lo, hi in self.exec_ranges())

    def contains(self, addr: int) -> bool:
        lo, hi = self.span()
        return lo <= addr < hi

    def is_instruction(self, addr: int) -> bool:
        return self.imap.contains(addr - self.base)

    def instructions_in(self, lo: int, hi: int) -> list[int]:
        """Absolute valid-instruction addresses within [lo, hi)."""
        return [self.base + off
                for off in self.imap.offsets_in(lo - self.base, hi - self.base)]

    def exec_byte_count(self) -> int:
        return sum(hi - lo for lo, hi in self.module.executable_ranges())


@dataclass(frozen=True)
class CallbackFinding:
    """A code pointer admitted by a scan heuristic."""

    address: int
    pattern: str
    source_module: str


class TransferLookupTable:
    """Absolute target address -> {source scope -> provenance set}."""

    def __init__(self) -> None:
        self._targets: dict[int, dict[str, set[str]]] = {}

    def add(self, target: int, scope: str, provenance: str) -> None:
        self._targets.setdefault(target, {}).setdefault(scope, set()).add(provenance)

    def discard_scope(self, target: int, scope: str) -> None:
        scopes = self._targets.get(target)
        if scopes is None:
            return
        scopes.pop(scope, None)
        if not scopes:
            del self._targets[target]

    def discard_target(self, target: int) -> None:
        self._targets.pop(target, None)

    def drop_provenance(self, provenance: str) -> None:
        """Remove one provenance everywhere, pruning emptied scopes/targets."""
        for target in list(self._targets):
            scopes = self._targets[target]
            for scope in list(scopes):
                scopes[scope].discard(provenance)
                if not scopes[scope]:
                    del scopes[scope]
            if not scopes:
                del self._targets[target]

    def scopes(self, target: int) -> dict[str, set[str]]:
        return self._targets.get(target, {})

    def allows(self, target: int, scope: str) -> bool:
        scopes = self._targets.get(target)
        return scopes is not None and (scope in scopes or GLOBAL_SCOPE in scopes)

    def targets_for(self, scope: str) -> set[int]:
        return {t for t, scopes in self._targets.items()
                if scope in scopes or GLOBAL_SCOPE in scopes}

    def targets(self) -> list[int]:
        return sorted(self._targets)

    def snapshot(self) -> dict[int, dict[str, tuple[str, ...]]]:
        """Canonical, comparable copy."""
        return {t: {s: tuple(sorted(p)) for s, p in scopes.items()}
                for t, scopes in self._targets.items()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TransferLookupTable):
            return NotImplemented
        return self.snapshot() == other.snapshot()

    def __len__(self) -> int:
        return len(self._targets)


class ProcessImage:
    """Mutable view of the running process; single writer, epoch-versioned."""

    def __init__(self, allowlist: frozenset[tuple[str, str]] = frozenset()) -> None:
        self.loaded: dict[str, LoadedModule] = {}  # insertion order = load order
        self.table = TransferLookupTable()
        self.callback_findings: list[CallbackFinding] = []
        self.plt_resolutions: dict[tuple[str, int], int] = {}
        self.epoch = 0
        self.allowlist = allowlist
        self._target_cache: dict[str, frozenset[int]] = {}
        self._target_cache_epoch = -1

    # -- queries ---------------------------------------------------------

    @property
    def callback_set(self) -> set[int]:
        return {f.address for f in self.callback_findings}

    def module_at(self, addr: int) -> LoadedModule | None:
        for lm in self.loaded.values():
            if lm.contains(addr):
                return lm
        return None

    def exec_module_at(self, addr: int) -> LoadedModule | None:
        for lm in self.loaded.values():
            if lm.contains_exec(addr):
                return lm
        return None

    def is_instruction(self, addr: int) -> bool:
        lm = self.exec_module_at(addr)
        return lm is not None and lm.is_instruction(addr)

    def by_path(self, path: str, base: int | None = None) -> LoadedModule | None:
        hits = [lm for lm in self.loaded.values() if lm.path == path
                and (base is None or lm.base == base)]
        return hits[-1] if hits else None

    def call_target_set(self, module_id: str) -> frozenset[int]:
        """All addresses the given module may call (table plus allowlist)."""
        if self._target_cache_epoch != self.epoch:
            self._target_cache.clear()
            self._target_cache_epoch = self.epoch
        cached = self._target_cache.get(module_id)
        if cached is not None:
            return cached
        targets = set(self.table.targets_for(module_id))
        targets.update(self._allowlist_targets(module_id))
        result = frozenset(targets)
        self._target_cache[module_id] = result
        return result

    def _allowlist_targets(self, module_id: str) -> set[int]:
        if not self.allowlist:
            return set()
        lm = self.loaded.get(module_id)
        if lm is None:
            return set()
        basename = lm.path.rsplit("/", 1)[-1]
        wanted = {sym for key, sym in self.allowlist if key in (lm.path, basename)}
        out: set[int] = set()
        for exporter in self.loaded.values():
            for rec in exporter.module.export_records():
                if rec.name in wanted and rec.kind == "function":
                    out.add(exporter.base + rec.value)
        return out

    def resolve_import(self, name: str) -> LoadedModule | None:
        """First-loaded exporter of ``name`` (load-order resolution)."""
        for lm in self.loaded.values():
            if name in lm.module.exports:
                return lm
        return None

    def import_resolutions(self, module_id: str) -> dict[str, str | None]:
        lm = self.loaded[module_id]
        out: dict[str, str | None] = {}
        for name in lm.module.imports:
            exporter = self.resolve_import(name)
            out[name] = exporter.module_id if exporter else None
        return out

    def function_extent(self, addr: int) -> tuple[int, int] | None:
        """Enclosing function interval, or the section granule carved by
        known symbol starts when precise intervals are unavailable.

        Non-stripped modules use symbol value+size intervals, falling back
        to granules bounded by all known function starts.  Stripped
        modules only know exported starts, so the granule degrades to
        section/exported-symbol granularity.
        """
        lm = self.exec_module_at(addr)
        if lm is None:
            return None
        off = addr - lm.base
        mod = lm.module
        if not mod.stripped:
            best: tuple[int, int] | None = None
            for lo, hi in mod.function_intervals():
                if lo <= off < hi and (best is None or lo >= best[0]):
                    best = (lo, hi)
            if best is not None:
                return (lm.base + best[0], lm.base + best[1])
            boundaries = sorted(mod.defined_function_starts())
        else:
            boundaries = sorted(mod.export_function_starts())
        section = mod.section_at(off)
        if section is None or not section.executable:
            return None
        in_section = [b for b in boundaries if section.contains(b)]
        i = bisect_right(in_section, off)
        lo = in_section[i - 1] if i > 0 else section.virtual_offset
        hi = in_section[i] if i < len(in_section) else section.end
        return (lm.base + lo, lm.base + hi)

    # -- mutations ---------------------------------------------------------

    def load_module(self, image: ModuleImage, base: int,
                    imap: InstructionMap) -> LoadedModule:
        """Map ``image`` at ``base`` and extend the lookup table.

        Raises:
            ProcessError: misaligned or overlapping base.
        """
        if base % PAGE_SIZE:
            raise ProcessError("misaligned-base",
                               f"{image.path}: base {hex(base)} not page-aligned")
        module_id = f"{image.path}@{base:#x}"
        if module_id in self.loaded:
            raise ProcessError("overlapping-base",
                               f"{image.path} already loaded at {hex(base)}")
        lm = LoadedModule(module=image, base=base, imap=imap, module_id=module_id)
        lo, hi = lm.span()
        for other in self.loaded.values():
            o_lo, o_hi = other.span()
            if lo < o_hi and o_lo < hi:
                raise ProcessError(
                    "overlapping-base",
                    f"{image.path} at {hex(base)} overlaps {other.module_id}")
        self.loaded[module_id] = lm
        self._extend_table_for(lm)
        self.epoch += 1
        return lm

    def _extend_table_for(self, lm: LoadedModule) -> None:
        mod = lm.module
        # Functions defined in the module, callable from the module itself.
        if not mod.stripped:
            for off in mod.defined_function_starts():
                if mod.in_executable_range(off):
                    self.table.add(lm.base + off, lm.module_id, PROV_LOCAL_SYMBOL)
        else:
            for off in lm.imap.offsets:
                self.table.add(lm.base + off, lm.module_id, PROV_LOCAL_SYMBOL)
        # New module's exports, callable from every importer already loaded.
        exports = [(r.name, r.value) for r in mod.export_records()
                   if r.kind == "function" and mod.in_executable_range(r.value)]
        for other in self.loaded.values():
            for name, off in exports:
                if name in other.module.imports:
                    self.table.add(lm.base + off, other.module_id,
                                   PROV_EXPORT_IMPORT)
        # New module's imports, resolved against every loaded exporter.
        wanted = set(mod.imports)
        for other in self.loaded.values():
            for rec in other.module.export_records():
                if (rec.name in wanted and rec.kind == "function"
                        and other.module.in_executable_range(rec.value)):
                    self.table.add(other.base + rec.value, lm.module_id,
                                   PROV_EXPORT_IMPORT)

    def unload_module(self, module_id: str) -> None:
        """Remove a module, revoking every binding to or from it.

        Raises:
            ProcessError: ``unknown-module`` if not loaded.
        """
        lm = self.loaded.get(module_id)
        if lm is None:
            raise ProcessError("unknown-module", f"not loaded: {module_id}")
        lo, hi = lm.span()
        del self.loaded[module_id]
        for target in self.table.targets():
            if lo <= target < hi:
                self.table.discard_target(target)
            else:
                self.table.discard_scope(target, module_id)
        self.callback_findings = [
            f for f in self.callback_findings
            if f.source_module != module_id and not (lo <= f.address < hi)]
        self.table.drop_provenance(PROV_CALLBACK)
        for f in self.callback_findings:
            self.table.add(f.address, GLOBAL_SCOPE, PROV_CALLBACK)
        self.plt_resolutions = {
            (mid, plt): tgt for (mid, plt), tgt in self.plt_resolutions.items()
            if mid != module_id and not (lo <= tgt < hi)}
        self.epoch += 1

    def admit_callbacks(self, findings: list[CallbackFinding]) -> int:
        """Add scan findings to the callback set; returns how many were new.

        Bumps the epoch only when the admitted set actually grows.
        """
        known = {(f.address, f.pattern, f.source_module)
                 for f in self.callback_findings}
        added = 0
        for f in findings:
            key = (f.address, f.pattern, f.source_module)
            if key in known:
                continue
            known.add(key)
            self.callback_findings.append(f)
            self.table.add(f.address, GLOBAL_SCOPE, PROV_CALLBACK)
            added += 1
        if added:
            self.epoch += 1
        return added

    def resolve_plt(self, module_id: str, plt_address: int) -> int:
        """Resolve a PLT entry to the first-loaded exporter's address.

        The resolved pair is recorded so replay treats later calls through
        this entry as direct.

        Raises:
            ProcessError: ``unknown-module`` / no such PLT entry.
            ResolutionError: ``unresolved-symbol`` when no loaded module
                exports the name.
        """
        lm = self.loaded.get(module_id)
        if lm is None:
            raise ProcessError("unknown-module", f"not loaded: {module_id}")
        off = plt_address - lm.base
        entry = next((p for p in lm.module.plt_entries if p.address == off), None)
        if entry is None:
            raise ProcessError(
                "unknown-module",
                f"{module_id}: {hex(plt_address)} is not a PLT entry")
        exporter = self.resolve_import(entry.symbol)
        if exporter is None:
            raise ResolutionError(
                "unresolved-symbol",
                f"{module_id}: no loaded exporter for {entry.symbol!r}")
        value = exporter.module.export_value(entry.symbol)
        target = exporter.base + value
        self.plt_resolutions[(module_id, plt_address)] = target
        return target

    def rebuild_table(self) -> TransferLookupTable:
        """From-scratch table over the current loaded set and callback set.

        Incremental maintenance must be indistinguishable from this.
        """
        fresh = TransferLookupTable()
        for lm in self.loaded.values():
            mod = lm.module
            if not mod.stripped:
                for off in mod.defined_function_starts():
                    if mod.in_executable_range(off):
                        fresh.add(lm.base + off, lm.module_id, PROV_LOCAL_SYMBOL)
            else:
                for off in lm.imap.offsets:
                    fresh.add(lm.base + off, lm.module_id, PROV_LOCAL_SYMBOL)
        for exporter in self.loaded.values():
            exports = [(r.name, r.value) for r in exporter.module.export_records()
                       if r.kind == "function"
                       and exporter.module.in_executable_range(r.value)]
            for importer in self.loaded.values():
                for name, off in exports:
                    if name in importer.module.imports:
                        fresh.add(exporter.base + off, importer.module_id,
                                  PROV_EXPORT_IMPORT)
        for f in self.callback_findings:
            fresh.add(f.address, GLOBAL_SCOPE, PROV_CALLBACK)
        return fresh

    def check_table_targets_valid(self) -> list[int]:
        """Table targets that are not valid instruction starts (should be [])."""
        return [t for t in self.table.targets() if not self.is_instruction(t)]

    def snapshot_dict(self) -> dict:
        """Diagnostic dump of the current image."""
        return {
            "epoch": self.epoch,
            "modules": [
                {"module_id": lm.module_id, "path": lm.path,
                 "base": hex(lm.base), "stripped": lm.module.stripped,
                 "imports": self.import_resolutions(lm.module_id)}
                for lm in self.loaded.values()
            ],
            "callback_set": sorted(hex(a) for a in self.callback_set),
            "plt_resolutions": {
                f"{mid}+{hex(plt)}": hex(tgt)
                for (mid, plt), tgt in sorted(self.plt_resolutions.items())},
            "table_targets": len(self.table),
        }
