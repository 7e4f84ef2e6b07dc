"""How gradients travel through a stack of ODE blocks.

With the linear probe F(y) = c*y every block is a scalar map, so the gradient
through n blocks is (per-block factor)^n. Reverse-mode autodiff through the
real block code should agree with that to rounding error.

Run: python3 demos/depth_gradients.py
"""

from odeformer import blocks as B
from odeformer.checks import autodiff_depth_gradient

c, n = 0.1, 8
factors = {
    "Euler": 1 + c,
    "RK2": 1 + c + c * c / 2,
    "RK2GammaOne": 1 + 2 * c + c * c,
    "RK4": 1 + c + c ** 2 / 2 + c ** 3 / 6 + c ** 4 / 24,
}
print(f"c = {c}, {n} blocks")
for tag, k in factors.items():
    print(f"{tag:>12}: autodiff {autodiff_depth_gradient(tag, c, n):.10f}  closed form {k ** n:.10f}")
print("library closed form, RK2:", B.analytic_depth_gradient("RK2", c, n, 0))
