"""Decompose the bank procedures and show the graphs recovery schedules by.

Run: python demos/01_analyze_bank.py
"""

from pacman import analyze
from pacman.ir import extract_data_deps, extract_flow_deps, format_procedure
from pacman.workloads import fixture_procedures


def main() -> None:
    procs = fixture_procedures("bank")
    for ir in procs:
        print(format_procedure(ir))
        flow = sorted((e.from_op, e.to_op) for e in extract_flow_deps(ir))
        data = sorted((e.from_op, e.to_op) for e in extract_data_deps(ir))
        print(f"  flow edges {flow}")
        print(f"  data edges {data}\n")

    ldgs, gdg = analyze(procs)
    print("Local slicings (each slice is a set of operation indices):")
    for g in ldgs:
        print(f"  {g.proc}: " + ", ".join(f"{s.name}={list(s.ops)}" for s in g.slices))
        for a, b in sorted(g.edges):
            print(f"    {g.proc}.{a} -> {g.proc}.{b}")

    print("\nGlobal blocks in topological order:")
    for block_id in gdg.topological_order():
        block = gdg.blocks[block_id]
        print(f"  block {block_id}: " + ", ".join(s.name for s in block.slices))
    print("Block edges:", sorted(gdg.edges))
    print("\nBlocks 2 and 3 have no edge between them, so History inserts replay")
    print("on one core while the Saving bonuses replay on another.")


if __name__ == "__main__":
    main()
