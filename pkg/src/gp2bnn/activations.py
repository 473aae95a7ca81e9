"""Parametric scalar activations phi(x | eta).

Every activation is vectorised over arbitrary array shapes and offers

* ``value(x)``          phi(x)
* ``deriv(x)``          d phi / d x
* ``vjp(x, g)``         ``(g * phi'(x), sum(g * d phi / d eta))`` -- the reverse-mode
                        product the training pipeline needs without materialising
                        per-element parameter Jacobians.

Instances are immutable; ``with_params`` returns a copy carrying new ``eta``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from . import _kernels

TWO_PI = 2.0 * math.pi


def _relu(x):
    return np.maximum(x, 0.0)


def _relu_d(x):
    return (x > 0).astype(float)


def _silu(x):
    return x * expit(x)


def _silu_d(x):
    s = expit(x)
    return s + x * s * (1.0 - s)


def _rbf(x):
    return np.exp(-x * x)


def _rbf_d(x):
    return -2.0 * x * np.exp(-x * x)


def _erf_d(x):
    return (2.0 / math.sqrt(math.pi)) * np.exp(-x * x)


def _tanh_d(x):
    return 1.0 - np.tanh(x) ** 2


FIXED = {
    "relu": (_relu, _relu_d),
    "tanh": (np.tanh, _tanh_d),
    "silu": (_silu, _silu_d),
    "rbf": (_rbf, _rbf_d),
    "erf": (erf, _erf_d),
    "identity": (lambda x: x, np.ones_like),
}


class Activation:
    kind: str = ""

    def __init__(self, params=()):
        p = np.array(params, dtype=float).ravel()
        if p.size != self.n_params:
            raise ValueError(f"{self.spec} expects {self.n_params} parameters, got {p.size}")
        p.setflags(write=False)
        self._params = p

    @property
    def params(self) -> np.ndarray:
        return self._params

    @property
    def n_params(self) -> int:
        raise NotImplementedError

    @property
    def spec(self) -> str:
        raise NotImplementedError

    def with_params(self, params) -> "Activation":
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        Activation.__init__(new, params)
        return new

    def __call__(self, x):
        return self.value(x)

    def value(self, x):
        raise NotImplementedError

    def deriv(self, x):
        raise NotImplementedError

    def vjp(self, x, g):
        raise NotImplementedError

    def to_dict(self) -> dict:
        return {"spec": self.spec, "params": self.params.tolist()}

    def __repr__(self):
        return f"{type(self).__name__}({self.spec!r}, n_params={self.n_params})"


class Fixed(Activation):
    kind = "fixed"

    def __init__(self, name: str, params=()):
        name = name.lower()
        if name not in FIXED:
            raise ValueError(f"unknown fixed activation {name!r}")
        self.name = name
        self._f, self._df = FIXED[name]
        super().__init__(params)

    @property
    def n_params(self):
        return 0

    @property
    def spec(self):
        return self.name

    def value(self, x):
        return self._f(np.asarray(x, dtype=float))

    def deriv(self, x):
        return self._df(np.asarray(x, dtype=float))

    def vjp(self, x, g):
        return g * self.deriv(x), np.zeros(0)


class NNAct(Activation):
    """A tiny MLP R -> R with a linear output unit."""

    kind = "nn"

    def __init__(self, widths=(5,), inner: str = "silu", params=None, rng=None):
        self.widths = tuple(int(w) for w in widths)
        if not self.widths or min(self.widths) < 1:
            raise ValueError("NN activation needs at least one hidden layer of positive width")
        inner = inner.lower()
        if inner not in FIXED:
            raise ValueError(f"unknown inner nonlinearity {inner!r}")
        self.inner = inner
        self._f, self._df = FIXED[inner]
        dims = (1,) + self.widths + (1,)
        self._shapes = list(zip(dims[:-1], dims[1:]))
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            chunks = []
            for fan_in, fan_out in self._shapes:
                chunks.append(rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=fan_in * fan_out))
                chunks.append(rng.normal(0.0, 0.1, size=fan_out))
            params = np.concatenate(chunks)
        super().__init__(params)

    @property
    def n_params(self):
        return sum(i * o + o for i, o in self._shapes)

    @property
    def spec(self):
        return "nn:" + "x".join(str(w) for w in self.widths) + ":" + self.inner

    def layers(self):
        out, k = [], 0
        for fan_in, fan_out in self._shapes:
            W = self._params[k : k + fan_in * fan_out].reshape(fan_in, fan_out)
            k += fan_in * fan_out
            b = self._params[k : k + fan_out]
            k += fan_out
            out.append((W, b))
        return out

    def _forward(self, x):
        a = np.asarray(x, dtype=float).reshape(-1, 1)
        zs, acts = [], [a]
        layers = self.layers()
        for W, b in layers[:-1]:
            z = a @ W + b
            a = self._f(z)
            zs.append(z)
            acts.append(a)
        W, b = layers[-1]
        return a @ W + b, zs, acts

    def _fused(self):
        # one hidden layer with a supported nonlinearity runs through the compiled loop
        if len(self.widths) != 1 or self.inner not in _kernels.INNER_CODES:
            return None
        (W1, b1), (W2, b2) = self.layers()
        return W1[0].copy(), b1.copy(), W2[:, 0].copy(), float(b2[0]), _kernels.INNER_CODES[self.inner]

    def value(self, x):
        x = np.asarray(x, dtype=float)
        fused = self._fused()
        if fused is not None:
            return _kernels.mlp1_value(np.ascontiguousarray(x).ravel(), *fused).reshape(x.shape)
        out, _, _ = self._forward(x)
        return out.reshape(x.shape)

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        fused = self._fused()
        if fused is not None:
            w1, b1, w2, _, code = fused
            return _kernels.mlp1_deriv(np.ascontiguousarray(x).ravel(), w1, b1, w2, code).reshape(x.shape)
        gx, _ = self._backward(x, None, need_params=False)
        return gx

    def vjp(self, x, g):
        x = np.asarray(x, dtype=float)
        fused = self._fused()
        if fused is not None:
            w1, b1, w2, _, code = fused
            g = np.broadcast_to(np.asarray(g, dtype=float), x.shape)
            gx, gw1, gb1, gw2, gb2 = _kernels.mlp1_vjp(
                np.ascontiguousarray(x).ravel(), np.ascontiguousarray(g).ravel(), w1, b1, w2, code
            )
            return gx.reshape(x.shape), np.concatenate([gw1, gb1, gw2, [gb2]])
        return self._backward(x, g, need_params=True)

    def _backward(self, x, g, need_params):
        _, zs, acts = self._forward(x)
        layers = self.layers()
        n = acts[0].shape[0]
        delta = np.ones((n, 1)) if g is None else np.asarray(g, dtype=float).reshape(-1, 1)
        per_layer = [None] * len(layers)
        for li in range(len(layers) - 1, -1, -1):
            if li < len(layers) - 1:
                delta = delta * self._df(zs[li])
            if need_params:
                per_layer[li] = ((acts[li].T @ delta).ravel(), delta.sum(axis=0))
            delta = delta @ layers[li][0].T
        gx = delta.reshape(x.shape)
        if not need_params:
            return gx, None
        return gx, np.concatenate([np.concatenate(pair) for pair in per_layer])


class Rational(Activation):
    """P(x) / (1 + |Q(x)|) with Q lacking a constant term, so the denominator is >= 1."""

    kind = "rational"

    def __init__(self, num_degree: int = 5, den_degree: int = 4, params=None, rng=None):
        self.p = int(num_degree)
        self.q = int(den_degree)
        if self.p < 0 or self.q < 1:
            raise ValueError("rational activation needs num_degree >= 0 and den_degree >= 1")
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            a = np.zeros(self.p + 1)
            if self.p >= 1:
                a[1] = 1.0
            a += rng.normal(0.0, 0.05, size=a.size)
            b = rng.normal(0.0, 0.05, size=self.q)
            params = np.concatenate([a, b])
        super().__init__(params)

    @property
    def n_params(self):
        return self.p + 1 + self.q

    @property
    def spec(self):
        return f"rational:{self.p}:{self.q}"

    def _parts(self, x):
        a = self._params[: self.p + 1]
        b = self._params[self.p + 1 :]
        P = np.polynomial.polynomial.polyval(x, a)
        Q = np.polynomial.polynomial.polyval(x, np.concatenate([[0.0], b]))
        return a, b, P, Q

    def value(self, x):
        x = np.asarray(x, dtype=float)
        _, _, P, Q = self._parts(x)
        return P / (1.0 + np.abs(Q))

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        a, b, P, Q = self._parts(x)
        dP = np.polynomial.polynomial.polyval(x, np.polynomial.polynomial.polyder(a))
        dQ = np.polynomial.polynomial.polyval(x, b * np.arange(1, self.q + 1))
        D = 1.0 + np.abs(Q)
        return dP / D - P * np.sign(Q) * dQ / D**2

    def vjp(self, x, g):
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        _, _, P, Q = self._parts(x)
        D = 1.0 + np.abs(Q)
        gx = g * self.deriv(x)
        xf, gf = x.ravel(), g.ravel()
        Df, Pf, sQ = D.ravel(), P.ravel(), np.sign(Q).ravel()
        w_num = gf / Df
        w_den = -gf * Pf * sQ / Df**2
        powers = np.ones_like(xf)
        ga = np.empty(self.p + 1)
        gb = np.empty(self.q)
        for k in range(max(self.p, self.q) + 1):
            if k <= self.p:
                ga[k] = w_num @ powers
            if 1 <= k <= self.q:
                gb[k - 1] = w_den @ powers
            powers = powers * xf
        return gx, np.concatenate([ga, gb])


class PiecewiseLinear(Activation):
    """Linear interpolation through trainable knots with trainable outer slopes.

    Parameter layout: ``[breakpoints (n), values (n), left_slope, right_slope]``.
    Knots are sorted at evaluation time, so their positions may cross freely.
    """

    kind = "pwl"

    def __init__(self, n_breakpoints: int = 8, params=None, rng=None):
        self.n = int(n_breakpoints)
        if self.n < 2:
            raise ValueError("piecewise-linear activation needs at least 2 breakpoints")
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            bp = np.linspace(-3.0, 3.0, self.n)
            vals = np.tanh(bp) + rng.normal(0.0, 0.05, size=self.n)
            params = np.concatenate([bp, vals, [0.0, 0.0]])
        super().__init__(params)

    @property
    def n_params(self):
        return 2 * self.n + 2

    @property
    def spec(self):
        return f"pwl:{self.n}"

    def _locate(self, x):
        n = self.n
        order = np.argsort(self._params[:n], kind="stable")
        bp = self._params[:n][order]
        v = self._params[n : 2 * n][order]
        sl, sr = self._params[2 * n], self._params[2 * n + 1]
        seg = np.searchsorted(bp, x, side="right") - 1  # -1 left tail, n-1 right tail
        return order, bp, v, sl, sr, seg

    def _eval(self, x):
        order, bp, v, sl, sr, seg = self._locate(x)
        n = self.n
        i = np.clip(seg, 0, n - 2)
        span = np.maximum(bp[i + 1] - bp[i], 1e-12)
        t = (x - bp[i]) / span
        slope = (v[i + 1] - v[i]) / span
        y = v[i] + t * (v[i + 1] - v[i])
        left = seg < 0
        right = seg >= n - 1
        y = np.where(left, v[0] + sl * (x - bp[0]), y)
        y = np.where(right, v[n - 1] + sr * (x - bp[n - 1]), y)
        dy = np.where(left, sl, np.where(right, sr, slope))
        return y, dy, (order, bp, v, seg, i, span, t, left, right)

    def value(self, x):
        return self._eval(np.asarray(x, dtype=float))[0]

    def deriv(self, x):
        return self._eval(np.asarray(x, dtype=float))[1]

    def vjp(self, x, g):
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        _, dy, (order, bp, v, seg, i, span, t, left, right) = self._eval(x)
        n = self.n
        gx = g * dy
        g, x, i, t, span = g.ravel(), x.ravel(), i.ravel(), t.ravel(), span.ravel()
        left, right = left.ravel(), right.ravel()
        mid = ~(left | right)
        sl, sr = self._params[2 * n], self._params[2 * n + 1]
        rise = v[i + 1] - v[i]
        gm = np.where(mid, g, 0.0)
        g_v = np.bincount(i, weights=gm * (1.0 - t), minlength=n) + np.bincount(
            i + 1, weights=gm * t, minlength=n
        )
        g_bp = np.bincount(i, weights=gm * rise * (t - 1.0) / span, minlength=n) + np.bincount(
            i + 1, weights=-gm * rise * t / span, minlength=n
        )
        gl = np.where(left, g, 0.0)
        gr = np.where(right, g, 0.0)
        g_v[0] += gl.sum()
        g_v[n - 1] += gr.sum()
        g_bp[0] += -sl * gl.sum()
        g_bp[n - 1] += -sr * gr.sum()
        g_sl = gl @ (x - bp[0])
        g_sr = gr @ (x - bp[n - 1])
        # undo the sort
        out_bp = np.empty(n)
        out_v = np.empty(n)
        out_bp[order] = g_bp
        out_v[order] = g_v
        return gx, np.concatenate([out_bp, out_v, [g_sl, g_sr]])


class PeriodicFourier(Activation):
    """sum_i A_i cos(2 pi psi_i x) + sum_j B_j sin(2 pi nu_j x).

    Parameter layout: ``[cos freqs (K), sin freqs (K), cos amps (K), sin amps (K)]``,
    i.e. all frequencies first, then all amplitudes.
    """

    kind = "periodic"

    def __init__(self, K: int = 5, params=None, rng=None):
        self.K = int(K)
        if self.K < 1:
            raise ValueError("periodic activation needs K >= 1")
        if params is None:
            rng = np.random.default_rng(0) if rng is None else rng
            freqs = np.exp(rng.uniform(np.log(0.05), np.log(2.0), size=2 * self.K))
            amps = rng.normal(0.0, 1.0 / math.sqrt(2 * self.K), size=2 * self.K)
            params = np.concatenate([freqs, amps])
        super().__init__(params)

    @property
    def n_params(self):
        return 4 * self.K

    @property
    def spec(self):
        return f"periodic:{self.K}"

    def _split(self):
        K = self.K
        p = self._params
        return p[:K], p[K : 2 * K], p[2 * K : 3 * K], p[3 * K :]

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return _kernels.fourier_value(np.ascontiguousarray(x).ravel(), *self._split()).reshape(x.shape)

    def _value_numpy(self, x):
        x = np.asarray(x, dtype=float)
        fc, fs, ac, as_ = self._split()
        xe = x[..., None]
        return np.cos(TWO_PI * fc * xe) @ ac + np.sin(TWO_PI * fs * xe) @ as_

    def deriv(self, x):
        x = np.asarray(x, dtype=float)
        fc, fs, ac, as_ = self._split()
        xe = x[..., None]
        return -np.sin(TWO_PI * fc * xe) @ (TWO_PI * fc * ac) + np.cos(TWO_PI * fs * xe) @ (
            TWO_PI * fs * as_
        )

    def vjp(self, x, g):
        x = np.asarray(x, dtype=float)
        g = np.broadcast_to(np.asarray(g, dtype=float), x.shape)
        gx, *gp = _kernels.fourier_vjp(
            np.ascontiguousarray(x).ravel(), np.ascontiguousarray(g).ravel(), *self._split()
        )
        return gx.reshape(x.shape), np.concatenate(gp)

    def _vjp_numpy(self, x, g):
        x = np.asarray(x, dtype=float)
        g = np.asarray(g, dtype=float)
        fc, fs, ac, as_ = self._split()
        xf = x.reshape(-1, 1)
        gf = g.reshape(-1)
        cc, sc = np.cos(TWO_PI * fc * xf), np.sin(TWO_PI * fc * xf)
        cs, ss = np.cos(TWO_PI * fs * xf), np.sin(TWO_PI * fs * xf)
        gx = (-sc @ (TWO_PI * fc * ac) + cs @ (TWO_PI * fs * as_)) * gf
        g_ac = gf @ cc
        g_as = gf @ ss
        gx_f = gf * xf[:, 0]
        g_fc = -TWO_PI * ac * (gx_f @ sc)
        g_fs = TWO_PI * as_ * (gx_f @ cs)
        return gx.reshape(x.shape), np.concatenate([g_fc, g_fs, g_ac, g_as])


def make_activation(spec: str, params=None, rng=None) -> Activation:
    """Build an activation from a compact spec string.

    ``relu | tanh | silu | rbf | erf | identity``, ``nn:5:silu`` (``nn:10x10:silu`` for two
    hidden layers), ``rational:5:4``, ``pwl:8``, ``periodic:5``.
    """
    parts = spec.strip().lower().split(":")
    head = parts[0]
    if head in FIXED:
        if len(parts) != 1:
            raise ValueError(f"fixed activation {head!r} takes no arguments")
        return Fixed(head, () if params is None else params)
    try:
        if head == "nn":
            widths = tuple(int(w) for w in parts[1].split("x")) if len(parts) > 1 else (5,)
            inner = parts[2] if len(parts) > 2 else "silu"
            return NNAct(widths, inner, params=params, rng=rng)
        if head == "rational":
            p = int(parts[1]) if len(parts) > 1 else 5
            q = int(parts[2]) if len(parts) > 2 else 4
            return Rational(p, q, params=params, rng=rng)
        if head == "pwl":
            return PiecewiseLinear(int(parts[1]) if len(parts) > 1 else 8, params=params, rng=rng)
        if head == "periodic":
            return PeriodicFourier(int(parts[1]) if len(parts) > 1 else 5, params=params, rng=rng)
    except (IndexError, ValueError) as exc:
        raise ValueError(f"bad activation spec {spec!r}: {exc}") from exc
    raise ValueError(f"unknown activation spec {spec!r}")


def from_dict(d: dict) -> Activation:
    return make_activation(d["spec"], params=d.get("params") or None)


def act_eval(a: Activation, x: float) -> float:
    return float(a.value(np.asarray(float(x))))


def act_grad(a: Activation, x: float) -> tuple[float, np.ndarray]:
    gx, geta = a.vjp(np.array([float(x)]), np.ones(1))
    return float(gx[0]), np.asarray(geta, dtype=float)
