"""Registry of built-in analytic test functions.

Functions take (t, x) with t of shape (...,) and x of shape (..., d) and
return an array of shape (...,).  They are selected by name plus keyword
parameters (e.g. ``tsingular beta=0.75``); no dynamic code loading.
"""

from __future__ import annotations

import numpy as np

__all__ = ["make_function", "FUNCTIONS"]


def _smooth_sine(**kw):
    freq = kw.get("freq", 1.0)

    def f(t, x):
        out = np.sin(np.pi * freq * np.asarray(t, float))
        x = np.atleast_2d(np.asarray(x, float))
        for k in range(x.shape[-1]):
            out = out * np.sin(np.pi * freq * x[..., k])
        return out

    return f


def _affine(**kw):
    a = kw.get("a", 1.0)
    b = kw.get("b", 1.0)

    def f(t, x):
        x = np.atleast_2d(np.asarray(x, float))
        return a * np.asarray(t, float) + b * x.sum(axis=-1) + kw.get("c", 0.5)

    return f


def _tsingular(**kw):
    beta = kw.get("beta", 0.75)

    def f(t, x):
        t = np.maximum(np.asarray(t, float), 0.0)
        return t ** beta

    return f


def _xcorner(**kw):
    alpha = kw.get("alpha", 0.6)
    corner = kw.get("corner", None)

    def f(t, x):
        x = np.atleast_2d(np.asarray(x, float))
        c = np.zeros(x.shape[-1]) if corner is None else np.asarray(corner, float)
        r = np.sqrt(((x - c) ** 2).sum(axis=-1))
        return r ** alpha

    return f


def _gauss_bump(**kw):
    w = kw.get("width", 0.05)
    tc = kw.get("tc", 0.5)
    xc = kw.get("xc", 0.5)

    def f(t, x):
        x = np.atleast_2d(np.asarray(x, float))
        r2 = (np.asarray(t, float) - tc) ** 2 + ((x - xc) ** 2).sum(axis=-1)
        return np.exp(-r2 / w)

    return f


def _tkink(**kw):
    tc = kw.get("tc", 0.5)

    def f(t, x):
        return np.abs(np.asarray(t, float) - tc)

    return f


def _runge(**kw):
    s = kw.get("scale", 25.0)

    def f(t, x):
        x = np.atleast_2d(np.asarray(x, float))
        r2 = (np.asarray(t, float) - 0.5) ** 2 + ((x - 0.5) ** 2).sum(axis=-1)
        return 1.0 / (1.0 + s * r2)

    return f


FUNCTIONS = {
    "smooth-sine": _smooth_sine,
    "affine": _affine,
    "tsingular": _tsingular,
    "xcorner": _xcorner,
    "gauss-bump": _gauss_bump,
    "tkink": _tkink,
    "runge": _runge,
}


def make_function(name, **params):
    """Instantiate a registered test function by name."""
    if name not in FUNCTIONS:
        raise KeyError(f"unknown function {name!r}; known: {sorted(FUNCTIONS)}")
    return FUNCTIONS[name](**params)
