"""Convolution as an explicit matrix, and the norms the certificates use.

Run: python demos/operator_norms.py
"""
import numpy as np

from fwicert.linop import (ConvGeometry, build_conv_operator, build_transposed_conv_operator,
                           conv2d_direct, frobenius_norm, spectral_norm)

# A 2x2 kernel on a 3x3 image: every row of the operator is one window.
kernel = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
geom = ConvGeometry(3, 3, 1, 1, 2, 2)
op = build_conv_operator(kernel, geom)
print("operator (4 x 9):")
print(op)

x = np.arange(1.0, 10.0).reshape(1, 3, 3)
print("op @ vec(x)      :", op @ x.ravel())
print("direct conv      :", conv2d_direct(x, kernel, geom).ravel())
print("transposed op is op.T:",
      np.array_equal(build_transposed_conv_operator(kernel, geom), op.T))

# The kernel's own Frobenius norm undercounts the operator once windows overlap.
rng = np.random.default_rng(0)
kernel = rng.standard_normal((4, 2, 3, 3))
geom = ConvGeometry(8, 8, 2, 4, 3, 3, stride=1, padding=1)
op = build_conv_operator(kernel, geom)
print(f"\nkernel Frobenius   {np.linalg.norm(kernel):.3f}")
print(f"operator Frobenius {frobenius_norm(op):.3f}")
print(f"operator spectral  {spectral_norm(op):.3f}  (svd: {np.linalg.svd(op, compute_uv=False)[0]:.3f})")
