#!/usr/bin/env python3
"""Synthetic twin experiment: target reduction with and without symbols.

Builds randomized exe+lib fixture pairs, replays the same trace against
the full-symbol modules and their stripped twins (sharing the same
instruction-boundary knowledge), and prints a per-category comparison
table.  The full-symbol runs should dominate the stripped ones: stripping
coarsens intra-module verification to section granularity, inflating the
allowed-target sets.

Usage: python scripts/dair_twin_experiment.py [--pairs N] [--seed S]
"""

import argparse
import pathlib
import random
import sys

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))
sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "tests"))

from strategies import EXE_BASE, LIB_BASE, make_image  # noqa: E402

from dyncfi import (  # noqa: E402
    FixtureSpec,
    ReplayConfig,
    SymbolSpec,
    TraceEvent,
    load_sidecar,
    replay,
    sidecar_lines,
)


def build_pair(rng: random.Random):
    n_locals = rng.randint(1, 4)
    lib = FixtureSpec(
        path="libfoo.so", code=b"\x90" * 0x200,
        symbols=(SymbolSpec("foo", 0x1000, 0x30),
                 SymbolSpec("bar", 0x1040, 0x20)) + tuple(
            SymbolSpec(f"h{i}", 0x1080 + 0x20 * i, 0x18, binding="local",
                       exported=False) for i in range(n_locals)),
        instruction_offsets=(0x1004, 0x100c, 0x1044) + tuple(
            0x1084 + 0x20 * i for i in range(n_locals)))
    exe = FixtureSpec(
        path="app", code=b"\x90" * 0x100,
        symbols=(SymbolSpec("main", 0x1000, 0x40),),
        imports=("foo",), instruction_offsets=(0x1004, 0x1008))

    events = [
        TraceEvent(seq=1, tid=0, kind="load", path="app", base=EXE_BASE),
        TraceEvent(seq=2, tid=0, kind="load", path="libfoo.so", base=LIB_BASE),
        TraceEvent(seq=3, tid=0, kind="indirect-call", src=EXE_BASE + 0x1004,
                   dst=LIB_BASE + 0x1000, length=5),
        TraceEvent(seq=4, tid=0, kind="indirect-call", src=LIB_BASE + 0x1004,
                   dst=LIB_BASE + 0x1080, length=5),
        TraceEvent(seq=5, tid=0, kind="indirect-jump", src=LIB_BASE + 0x1084,
                   dst=LIB_BASE + 0x1084),
        TraceEvent(seq=6, tid=0, kind="return", src=LIB_BASE + 0x1088,
                   dst=LIB_BASE + 0x1009),
        TraceEvent(seq=7, tid=0, kind="return", src=LIB_BASE + 0x1008,
                   dst=EXE_BASE + 0x1009),
    ]
    return exe, lib, events


def pct(v):
    return f"{v * 100.0:8.2f}%" if v is not None else "       --"


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--pairs", type=int, default=20)
    parser.add_argument("--seed", type=int, default=1)
    args = parser.parse_args()
    rng = random.Random(args.seed)

    print(f"{'pair':>4} | {'DAIR full':>9} {'stripped':>9} | "
          f"{'call full':>9} {'stripped':>9} | {'jump full':>9} {'stripped':>9} | "
          f"{'ret':>7}")
    print("-" * 86)
    ordered = 0
    for i in range(args.pairs):
        exe, lib, events = build_pair(rng)
        sidecar = load_sidecar("\n".join(sidecar_lines(exe) + sidecar_lines(lib)))
        config = ReplayConfig(sidecar=sidecar)
        full_images = {s.path: make_image(s) for s in (exe, lib)}
        twin_images = {p: m.stripped_twin() for p, m in full_images.items()}
        full = replay(events, config, full_images).dair
        twin = replay(events, config, twin_images).dair
        fk, tk = full.per_kind(), twin.per_kind()
        print(f"{i:>4} | {pct(full.total())} {pct(twin.total())} | "
              f"{pct(fk['indirect-call'])} {pct(tk['indirect-call'])} | "
              f"{pct(fk['indirect-jump'])} {pct(tk['indirect-jump'])} | "
              f"{pct(fk['return'])}")
        if full.total() >= twin.total():
            ordered += 1
    print("-" * 86)
    print(f"full >= stripped in {ordered}/{args.pairs} pairs")
    return 0 if ordered == args.pairs else 1


if __name__ == "__main__":
    sys.exit(main())
