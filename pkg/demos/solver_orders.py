"""Halve the step size and watch the global error shrink by 2^p.

Run: python3 demos/solver_orders.py
"""

from odeformer import ode_core

for name, scheme in ode_core.PRESETS.items():
    rows = ode_core.order_table(scheme, ode_core.decay_problem(), [16, 32, 64, 128])
    print(f"{name:>5}  y' = -y")
    for r in rows:
        line = f"       n={r['n_steps']:4d}  error={r['error']:.3e}"
        if r["estimated_order"] is not None and r["estimated_order"] == r["estimated_order"]:
            line += f"  order~{r['estimated_order']:.2f}"
        print(line)
