"""Soft quantization of a short sequence, step by step.

Run: python3 demos/quantization_walkthrough.py
"""
import numpy as np

from attnbof.quantization import Codebook, accumulate_histogram, quantize, tnbof_forward
from attnbof.tensor import Tensor

np.set_printoptions(precision=4, suppress=True)

# Two features, six steps. The first half sits near (0, 0), the second near (3, 3).
X = np.array([[0.1, -0.2, 0.0, 3.1, 2.8, 3.0],
              [0.0, 0.1, -0.1, 2.9, 3.2, 3.0]])

rbf = Codebook.from_arrays([[0.0, 0.0], [3.0, 3.0], [0.0, 3.0]], [[1.0, 1.0]] * 3)
phi = quantize(Tensor(X), rbf).data
print("RBF memberships (rows = codewords, columns = steps)")
print(phi)
print("column sums", phi.sum(axis=0))
print("histogram  ", accumulate_histogram(Tensor(phi)).data)

# Reordering the steps leaves the plain histogram untouched.
shuffled = X[:, [5, 2, 0, 4, 1, 3]]
print("histogram of shuffled steps", accumulate_histogram(quantize(Tensor(shuffled), rbf)).data)

# The temporal variant adds a histogram over the most recent half.
print("long + short histogram", tnbof_forward(Tensor(X), rbf, rbf, split=0.5).data)

hyp = Codebook.from_arrays([[1.0, 0.0], [0.0, 1.0], [-1.0, -1.0]], kernel="hyperbolic", bias=[0.0, 0.0, 0.0])
print("hyperbolic memberships")
print(quantize(Tensor(X), hyp).data)
