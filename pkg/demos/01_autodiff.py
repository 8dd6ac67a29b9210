"""Reverse-mode differentiation on a tape.

Record a small computation, pull adjoints back through it, then compare
against central finite differences.
"""
import numpy as np

from abm_gvi import autodiff as ad

# A tape records every operation applied to its variables.
tape = ad.Tape()
x = tape.variable(np.array([0.5, -1.0, 2.0]))
w = tape.variable(np.array([[1.0, 2.0, 0.5]]))

# f(x, w) = sum(softplus(w @ x)) + mean(exp(-x^2))
y = ad.sum_(ad.softplus(ad.matmul(w, ad.reshape(x, (3, 1))))) + ad.mean(ad.exp(-(x * x)))
grads = tape.backward(y)
print("f       =", y.item())
print("df/dx   =", grads[x])
print("df/dw   =", grads[w])

# Cross-check with finite differences.
def f_of_x(v):
    return ad.sum_(ad.softplus(ad.matmul(ad.constant(w.values), ad.reshape(v, (3, 1))))) \
        + ad.mean(ad.exp(-(v * v)))

report = ad.grad_check(f_of_x, x.values)
print("max relative error vs finite differences: {:.1e}".format(report))

# Straight-through: the forward pass sees the hard value, the backward pass
# sees the soft one.
tape = ad.Tape()
p = tape.variable(np.array([0.3, 0.7]))
hard = (p.values > 0.5).astype(float)
st = ad.straight_through(p, hard)
g = tape.backward(ad.sum_(st * np.array([2.0, 3.0])))
print("forward", st.values, "backward", g[p])
