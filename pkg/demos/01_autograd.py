"""Reverse-mode autodiff on plain numpy arrays.

Build a graph out of Tensor ops, call backward() on a scalar, read the
gradients off the leaves. Everything is float64.
"""
import numpy as np

from vqgen import Adam, NonFiniteError, Tensor, grad_check
from vqgen.tensor import cross_entropy

# two leaves, one scalar loss
a = Tensor(np.array([2.0, 3.0]), requires_grad=True, name="a")
b = Tensor(np.array([4.0, 5.0]), requires_grad=True, name="b")
loss = ((a * b) + a.exp()).sum()
loss.backward()

print("loss  =", loss.item())
print("dL/da =", a.grad)  # b + exp(a)
print("dL/db =", b.grad)  # a
print("check dL/da:", b.data + np.exp(a.data))

# same gradient by central differences, no graph involved
h = 1e-6
num = np.zeros(2)
for i in range(2):
    ap, am = a.data.copy(), a.data.copy()
    ap[i] += h
    am[i] -= h
    num[i] = (((ap * b.data) + np.exp(ap)).sum() - ((am * b.data) + np.exp(am)).sum()) / (2 * h)
print("numeric dL/da:", num)

# broadcasting sums gradients back down to the leaf's shape
w = Tensor(np.ones((3, 2)), requires_grad=True)
s = Tensor(np.array([10.0, 20.0]), requires_grad=True)
(w * s).sum().backward()
print("\nbroadcast leaf (2,) gets grad", s.grad, "from a (3,2) product")

# masked softmax: masked slots come out exactly 0.0, not just tiny
scores = Tensor(np.array([[1.0, 2.0, 3.0, 4.0]]), requires_grad=True)
mask = np.array([[False, False, True, True]])  # True marks padding
att = scores.masked_fill(mask, -1e9).softmax(axis=-1)
print("\nmasked attention row:", att.data[0])
print("masked entries are exact zeros:", att.data[0, 2] == 0.0 == att.data[0, 3])

# every op checks for NaN/inf so a bad graph fails at the op, not later
try:
    Tensor(np.array([1.0, 0.0])).log()
except NonFiniteError as err:
    print("\nlog(0) raised:", err)

# grad_check does the finite-difference comparison for a whole parameter set
p = Tensor(np.arange(6.0).reshape(2, 3) / 10.0, requires_grad=True, name="p")
t = np.array([1, 2])


def fd_loss():
    return cross_entropy(p.reshape(2, 1, 3), t.reshape(2, 1))


report = grad_check(fd_loss, [("p", p)], h=1e-5)
print("\ngrad_check worst relative error:", report["worst"])

# Adam drives a quadratic bowl to its minimum
x = Tensor(np.array([5.0, -3.0]), requires_grad=True)
opt = Adam([x], lr=0.1)
for step in range(200):
    opt.zero_grad()
    (x * x).sum().backward()
    opt.step()
print("\nafter 200 Adam steps x =", x.data)
