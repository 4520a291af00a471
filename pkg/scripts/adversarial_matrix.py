#!/usr/bin/env python3
"""Redirect one transfer per mutation class and show the resulting verdicts.

Builds a small two-module workspace, replays a clean base trace, then
applies every mutation class in turn and prints which rule fired.  The
tail-call row is expected to stay allowed: jumps to the entry of a
function in the current allowed-call-target set are legal, which marks
the deliberate permissiveness boundary of the policy.

Usage: python scripts/adversarial_matrix.py
"""

import pathlib
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "tests"))

from strategies import EXE_BASE, LIB_BASE, two_module_workspace  # noqa: E402

from dyncfi import (  # noqa: E402
    MutationSpec,
    ReplayConfig,
    TraceEvent,
    generate_adversarial_trace,
    replay,
)


def main() -> int:
    _specs, images, sidecar = two_module_workspace()
    config = ReplayConfig(sidecar=sidecar)
    base = [
        TraceEvent(seq=1, tid=0, kind="load", path="app", base=EXE_BASE),
        TraceEvent(seq=2, tid=0, kind="load", path="libfoo.so", base=LIB_BASE),
        TraceEvent(seq=3, tid=0, kind="indirect-call", src=EXE_BASE + 0x1004,
                   dst=LIB_BASE + 0x1000, length=5),
        TraceEvent(seq=4, tid=0, kind="indirect-jump", src=LIB_BASE + 0x1004,
                   dst=LIB_BASE + 0x100c),
        TraceEvent(seq=5, tid=0, kind="return", src=LIB_BASE + 0x1008,
                   dst=EXE_BASE + 0x1009),
        TraceEvent(seq=6, tid=0, kind="indirect-jump", src=EXE_BASE + 0x1008,
                   dst=EXE_BASE + 0x1010),
    ]
    assert replay(base, config, images).clean, "base trace must be clean"

    print(f"{'class':<12} {'mutated seq':>11} {'decision':>9} {'rule':<22} detail")
    print("-" * 100)
    for klass in ("ret", "call", "jump", "jump-cross", "tailcall"):
        mutated = generate_adversarial_trace(base, MutationSpec(klass),
                                             config, images)
        report = replay(mutated, config, images)
        changed = next(i for i, (a, b) in enumerate(zip(base, mutated)) if a != b)
        seq = mutated[changed].seq
        verdict = next(v for v in report.verdicts if v.seq == seq)
        print(f"{klass:<12} {seq:>11} {verdict.decision:>9} "
              f"{verdict.rule:<22} {verdict.reason}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
