"""Independent reference implementations used by the tests."""

import math

import numpy as np

ALPHA_MIN = 1.0 / 255.0


def composite_ray(pixel, means2d, conics, opacities, weights, feats, depths, valid, alpha_max=0.999,
                  background=None):
    """Sequential front-to-back blending of every kernel at one pixel.

    Returns (color, per-kernel blend weights, final transmittance).
    """
    order = sorted((float(depths[i]), i) for i in range(len(depths)) if valid[i])
    T = 1.0
    color = np.zeros(feats.shape[1])
    wts = np.zeros(len(depths))
    for _, i in order:
        dx = pixel[0] - means2d[i, 0]
        dy = pixel[1] - means2d[i, 1]
        a, b, c = conics[i]
        power = 0.5 * (a * dx * dx + c * dy * dy) + b * dx * dy
        alpha = min(alpha_max, opacities[i] * math.exp(-power))
        if alpha < ALPHA_MIN:
            continue
        a2 = alpha * weights[i]
        wts[i] = a2 * T
        color += feats[i] * wts[i]
        T *= 1.0 - a2
    if background is not None:
        color = color + T * np.asarray(background)
    return color, wts, T


def pinhole(p_cam, K):
    return np.array([(K[0, 0] * p_cam[0] + K[0, 1] * p_cam[1]) / p_cam[2] + K[0, 2],
                     K[1, 1] * p_cam[1] / p_cam[2] + K[1, 2]])


def numeric_jacobian(f, x, eps=1e-6):
    x = np.asarray(x, dtype=np.float64)
    f0 = np.asarray(f(x))
    J = np.zeros((f0.size, x.size))
    for i in range(x.size):
        d = np.zeros_like(x)
        d[i] = eps
        J[:, i] = (np.asarray(f(x + d)) - np.asarray(f(x - d))).ravel() / (2 * eps)
    return J


def ray_plane_depth(ray, point, normal):
    """Camera z of the intersection of the ray t*ray with the plane through ``point``."""
    t = np.dot(point, normal) / np.dot(ray, normal)
    return t * ray[2]
