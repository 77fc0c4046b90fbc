"""Independent density oracles (scipy.stats only, scalar loops).

Run once; the printed values are frozen into tests/test_model.py.
"""
import numpy as np
from scipy.stats import norm

# --- case 1: static normal, M=2, no covariates, T=3 -----------------------
y = np.array([0.3, -0.4, 1.1])
alpha = [0.4, 0.6]
mu = [-1.0, 1.0]
s2 = [0.64, 1.44]
comp = []
for j in range(2):
    lp = sum(norm.logpdf(y[t], loc=mu[j], scale=np.sqrt(s2[j])) for t in range(3))
    comp.append(lp)
g = np.logaddexp(np.log(alpha[0]) + comp[0], np.log(alpha[1]) + comp[1])
print("case1 comps:", [repr(c) for c in comp])
print("case1 mixture  :", repr(float(g)))

# --- case 2: static mixture K=2, M=2, q_x=1, T=2 ---------------------------
y2 = np.array([0.5, -1.2])
x2 = np.array([[0.7], [-0.3]])
alpha2 = [0.35, 0.65]
beta = [0.8, -0.5]
tau = [[0.3, 0.7], [0.6, 0.4]]
muk = [[-1.5, 0.5], [-0.2, 1.3]]
s22 = [0.81, 0.49]
comp2 = []
for j in range(2):
    lp = 0.0
    for t in range(2):
        resid = y2[t] - x2[t, 0] * beta[j]
        dens = sum(
            tau[j][k] * norm.pdf(resid, loc=muk[j][k], scale=np.sqrt(s22[j]))
            for k in range(2)
        )
        lp += np.log(dens)
    comp2.append(lp)
g2 = np.logaddexp(np.log(alpha2[0]) + comp2[0], np.log(alpha2[1]) + comp2[1])
print("case2 comps:", [repr(c) for c in comp2])
print("case2 mixture:", repr(float(g2)))

# --- case 3: ar1 normal, M=2, no covariates, T=3 ---------------------------
y3 = np.array([0.2, 0.9, -0.5])
alpha3 = [0.45, 0.55]
rho = [0.4, -0.3]
mu3 = [0.6, -0.8]
s23 = [0.25, 0.36]
mu1 = [0.5, -0.6]
s21 = [0.49, 0.64]
comp3 = []
for j in range(2):
    lp = norm.logpdf(y3[0], loc=mu1[j], scale=np.sqrt(s21[j]))
    for t in (1, 2):
        m = rho[j] * y3[t - 1] + (1.0 - rho[j]) * mu3[j]
        lp += norm.logpdf(y3[t], loc=m, scale=np.sqrt(s23[j]))
    comp3.append(lp)
g3 = np.logaddexp(np.log(alpha3[0]) + comp3[0], np.log(alpha3[1]) + comp3[1])
print("case3 comps:", [repr(c) for c in comp3])
print("case3 mixture:", repr(float(g3)))

# --- case 4: ar1 mixture K=2, M=1, q_x=1, T=3 -------------------------------
y4 = np.array([1.1, 0.3, 0.8])
x4 = np.array([[0.2], [-0.4], [0.5]])
rho4 = 0.5
beta4 = [0.9]
beta14 = [0.3]
tau4 = [0.25, 0.75]
mu4 = [-0.7, 0.4]
s24 = 0.16
mu14 = [-0.5, 0.6]
s214 = 0.36
lp = np.log(sum(
    tau4[k] * norm.pdf(y4[0] - x4[0, 0] * beta14[0], loc=mu14[k],
                       scale=np.sqrt(s214))
    for k in range(2)
))
for t in (1, 2):
    resid = y4[t] - rho4 * y4[t - 1] - (x4[t, 0] - rho4 * x4[t - 1, 0]) * beta4[0]
    dens = sum(
        tau4[k] * norm.pdf(resid, loc=(1.0 - rho4) * mu4[k], scale=np.sqrt(s24))
        for k in range(2)
    )
    lp += np.log(dens)
print("case4 component logdensity:", repr(float(lp)))
