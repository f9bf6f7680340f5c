"""Messages in natural parameters: products, quotients and moment averaging.

Run with ``python3 demos/message_algebra.py``.
"""
import numpy as np

from consensus_mp import expfam
from consensus_mp.expfam import Bernoulli, Gaussian, MvGaussian

# Two Gaussian messages about the same scalar. Multiplying adds natural
# parameters, so the product is sharper than either factor.
a = Gaussian.from_mean_var(1.0, 4.0)
b = Gaussian.from_mean_var(3.0, 1.0)
prod = expfam.multiply(a, b)
print("product  ", prod)
print("quotient ", expfam.divide(prod, b), "(recovers a)")

# The vector case works the same way in information form (h, K).
m = MvGaussian.from_mean_cov([0.0, 1.0], [[1.0, 0.3], [0.3, 2.0]])
n = MvGaussian.from_mean_cov([2.0, -1.0], np.eye(2))
print("mv product mean", expfam.multiply(m, n).mean)

# Moment averaging is how a forest turns its per-tree leaf outputs into one
# message: match the mean of the moments, not the mean of the parameters.
ms = [Gaussian.from_mean_var(0.0, 1.0), Gaussian.from_mean_var(4.0, 1.0)]
avg = expfam.moment_average(ms)
print("average of N(0,1) and N(4,1):", avg, "(variance 1 + spread 4)")

ps = [Bernoulli.from_prob(0.9), Bernoulli.from_prob(0.5)]
print("average Bernoulli p =", expfam.moment_average(ps).prob)
