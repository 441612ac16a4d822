"""Least-squares projection oracle solved through the normal equations."""
import numpy as np


def decompose_normal_equations(estimate, references, j):
    A = np.asarray(references, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    target = A[j]
    s_target = (target @ e) / (target @ target) * target
    coef = np.linalg.solve(A @ A.T, A @ e)
    p_all = coef @ A
    return s_target, p_all - s_target, e - p_all


def orthogonal_pair(rng, n):
    s1 = rng.standard_normal(n)
    s2 = rng.standard_normal(n)
    s2 -= (s2 @ s1) / (s1 @ s1) * s1
    s2 *= np.linalg.norm(s1) / np.linalg.norm(s2)
    return s1, s2
