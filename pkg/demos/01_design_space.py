"""Walk through the built-in designs: shapes, parameter counts, receptive fields, lints.

Run: python3 demos/01_design_space.py
"""
from complab.analyzer import analyze, audit_reduction, vc_bound
from complab.netspec import DESIGN_NAMES, builtin_design, parse_spec

# The six designs differ only in where and how they shrink the feature maps.
for name in DESIGN_NAMES:
    rep = analyze(builtin_design(name))
    where = ", ".join(rep.to_dict()["reductions"])
    print(f"{name:<20} {rep.total_params_k:>6}K params   reductions at {where}")

# Full table for the pooling baseline; rf is clipped to the input once it covers it.
print()
print(analyze(builtin_design("design1")).to_table())

# Reducing before any convolution has looked at the image is flagged.
early = parse_spec("input 28 x 28 x 3\nb1: max_pool\nb2: 2 x conv3x3, 1, 32\nb3: 1 x conv1x1, 1, 10, linear\n")
lints, rate = audit_reduction(early)
print()
for l in lints:
    print(f"{l.severity:<7} {l.rule:<14} {l.block}: {l.message}")
print(f"reductions per stride-1 conv: {rate:.2f}")

# Capacity grows with both width and depth; depth enters quadratically.
for w, l in ((1_000_000, 10), (1_000_000, 20), (2_000_000, 10)):
    print(f"VC-style bound  w={w:>9,} l={l:>2}: {vc_bound(w, l):.3e}")
