"""Fault-conditioned two-time flow map, contraction metric network and analytic reference maps.

Every map exposes the same interface:

    forward(x, tau0, tau1, cond)        -> Phi_{tau0,tau1}(x) = x + (tau1 - tau0) Delta
    displacement(x, tau0, tau1, cond)   -> Delta
    induced_velocity(x, tau, cond)      -> Delta(x, tau, tau, cond)

with x (B, n), tau (B, 1) and cond (B, 2 + p) = [s / time_scale, (t - s) / gap_scale, w].
"""
import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

DTYPE = torch.float64


def init_lecun_normal(module):
    # truncated at two standard deviations, fan-in scaling
    std = math.sqrt(1.0 / module.weight.shape[-1]) / 0.87962566103423978
    nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
    nn.init.zeros_(module.bias)
    return module


_ACTIVATIONS = {"silu": nn.SiLU, "tanh": nn.Tanh, "softplus": nn.Softplus}


def _trunk(d_in, d_hidden, n_layers, activation):
    layers = []
    for i in range(n_layers):
        layers += [init_lecun_normal(nn.Linear(d_in if i == 0 else d_hidden, d_hidden)), _ACTIVATIONS[activation]()]
    return nn.Sequential(*layers)


class ConditionedMap(nn.Module):
    """Shared conditioning/normalisation buffers for flow maps."""

    def __init__(self, state_dim, fault_dim):
        super().__init__()
        self.state_dim = state_dim
        self.fault_dim = fault_dim
        self.register_buffer("x_mean", torch.zeros(state_dim, dtype=DTYPE))
        self.register_buffer("x_std", torch.ones(state_dim, dtype=DTYPE))
        self.register_buffer("disp_std", torch.ones(state_dim, dtype=DTYPE))
        self.register_buffer("time_scale", torch.ones((), dtype=DTYPE))
        self.register_buffer("gap_scale", torch.ones((), dtype=DTYPE))

    def set_normalizer(self, x_mean, x_std, disp_std, time_scale=1.0, gap_scale=1.0):
        def t(v):
            return torch.as_tensor(np.asarray(v, dtype=float), dtype=DTYPE)

        self.x_mean.copy_(t(x_mean))
        self.x_std.copy_(t(np.maximum(x_std, 1e-8)))
        self.disp_std.copy_(t(np.maximum(disp_std, 1e-8)))
        self.time_scale.copy_(t(max(time_scale, 1e-12)))
        self.gap_scale.copy_(t(max(gap_scale, 1e-12)))

    def condition(self, s, t, w, batch=None):
        """Conditioning rows [s / time_scale, (t - s) / gap_scale, w]."""
        w = torch.as_tensor(np.asarray(w, dtype=float), dtype=DTYPE).reshape(-1, self.fault_dim)
        s = torch.as_tensor(np.asarray(s, dtype=float), dtype=DTYPE).reshape(-1, 1)
        t = torch.as_tensor(np.asarray(t, dtype=float), dtype=DTYPE).reshape(-1, 1)
        B = batch or max(len(w), len(s), len(t))
        parts = [s / self.time_scale, (t - s) / self.gap_scale, w]
        return torch.cat([p.expand(B, -1) if len(p) == 1 else p for p in parts], -1)

    def forward(self, x, tau0, tau1, cond):
        return x + (tau1 - tau0) * self.displacement(x, tau0, tau1, cond)

    def induced_velocity(self, x, tau, cond):
        # d/dtau1 of x + (tau1 - tau0) Delta at tau1 = tau0 = tau
        return self.displacement(x, tau, tau, cond)

    def descriptor(self):
        raise NotImplementedError


class FlowMapModel(ConditionedMap):
    """MLP displacement Delta(x, tau0, tau1, s, t, w) with a zero-initialised head (identity map at init)."""

    def __init__(self, state_dim, fault_dim, d_hidden=128, n_layers=3, activation="silu"):
        super().__init__(state_dim, fault_dim)
        self.d_hidden, self.n_layers, self.activation = d_hidden, n_layers, activation
        self.trunk = _trunk(state_dim + 4 + fault_dim, d_hidden, n_layers, activation)
        self.head = nn.Linear(d_hidden, state_dim)
        self.reset_parameter()
        self.to(DTYPE)

    def reset_parameter(self):
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def displacement(self, x, tau0, tau1, cond):
        z = (x - self.x_mean) / self.x_std
        h = self.trunk(torch.cat([z, tau0, tau1, cond], -1))
        return self.head(h) * self.disp_std

    def descriptor(self):
        return {"class": "FlowMapModel", "state_dim": self.state_dim, "fault_dim": self.fault_dim,
                "d_hidden": self.d_hidden, "n_layers": self.n_layers, "activation": self.activation}


class MetricModel(nn.Module):
    """M(x, tau, w) = Theta^T Theta with Theta lower triangular, diag softplus + floor.

    The rate alpha^w is affine in w. The head is zero-initialised with a bias
    that makes the initial metric the identity.
    """

    def __init__(self, state_dim, fault_dim, d_hidden=64, n_layers=2, floor=1e-2, alpha_init=-0.1,
                 activation="tanh"):
        super().__init__()
        self.state_dim, self.fault_dim = state_dim, fault_dim
        self.d_hidden, self.n_layers, self.floor, self.activation = d_hidden, n_layers, floor, activation
        n = state_dim
        self.register_buffer("tril_rows", torch.tril_indices(n, n)[0])
        self.register_buffer("tril_cols", torch.tril_indices(n, n)[1])
        self.register_buffer("x_mean", torch.zeros(n, dtype=DTYPE))
        self.register_buffer("x_std", torch.ones(n, dtype=DTYPE))
        self.trunk = _trunk(n + 1 + fault_dim, d_hidden, n_layers, activation)
        self.head = nn.Linear(d_hidden, n * (n + 1) // 2)
        self.rate_head = nn.Linear(max(fault_dim, 1), 1)
        self.alpha_init = alpha_init
        self.reset_parameter()
        self.to(DTYPE)

    def reset_parameter(self):
        nn.init.zeros_(self.head.weight)
        bias = torch.zeros(self.head.bias.shape)
        diag = self.tril_rows == self.tril_cols
        bias[diag] = math.log(math.expm1(max(1.0 - self.floor, 1e-6)))
        with torch.no_grad():
            self.head.bias.copy_(bias)
        nn.init.zeros_(self.rate_head.weight)
        nn.init.constant_(self.rate_head.bias, self.alpha_init)

    def set_normalizer(self, x_mean, x_std):
        self.x_mean.copy_(torch.as_tensor(np.asarray(x_mean, dtype=float), dtype=DTYPE))
        self.x_std.copy_(torch.as_tensor(np.maximum(np.asarray(x_std, dtype=float), 1e-8), dtype=DTYPE))

    def _w(self, cond):
        if self.fault_dim == 0:
            return cond.new_zeros(len(cond), 1)
        return cond[:, -self.fault_dim:]

    def factor(self, x, tau, cond):
        n = self.state_dim
        z = (x - self.x_mean) / self.x_std
        raw = self.head(self.trunk(torch.cat([z, tau, self._w(cond)], -1)))
        diag = self.tril_rows == self.tril_cols
        entries = torch.where(diag, F.softplus(raw) + self.floor, raw)
        theta = raw.new_zeros(len(x), n, n)
        theta[:, self.tril_rows, self.tril_cols] = entries
        return theta

    def forward(self, x, tau, cond):
        theta = self.factor(x, tau, cond)
        return theta.transpose(1, 2) @ theta

    def rate(self, cond):
        return self.rate_head(self._w(cond)).squeeze(-1)

    def descriptor(self):
        return {"class": "MetricModel", "state_dim": self.state_dim, "fault_dim": self.fault_dim,
                "d_hidden": self.d_hidden, "n_layers": self.n_layers, "floor": self.floor,
                "alpha_init": self.alpha_init, "activation": self.activation}


class ConstantMetric(nn.Module):
    """Fixed metric M with fixed rate alpha, for testbeds with analytic certificates."""

    def __init__(self, M, alpha):
        super().__init__()
        M = torch.as_tensor(np.atleast_2d(np.asarray(M, dtype=float)), dtype=DTYPE)
        self.state_dim = M.shape[0]
        self.register_buffer("M", M)
        self.register_buffer("alpha", torch.as_tensor(float(alpha), dtype=DTYPE))

    def forward(self, x, tau, cond):
        return self.M.expand(len(x), -1, -1)

    def rate(self, cond):
        return self.alpha.expand(len(cond))


class ExponentialFlowMap(ConditionedMap):
    """Exact flow of dx/dtau = A x: Delta = phi_1(h A) A x with h = tau1 - tau0."""

    def __init__(self, A, fault_dim=0, terms=30):
        A = np.atleast_2d(np.asarray(A, dtype=float))
        super().__init__(A.shape[0], fault_dim)
        self.register_buffer("A", torch.as_tensor(A, dtype=DTYPE))
        self.terms = terms

    def displacement(self, x, tau0, tau1, cond):
        h = tau1 - tau0
        term = x @ self.A.T
        total = term
        for k in range(1, self.terms):
            term = h * (term @ self.A.T) / (k + 1)
            total = total + term
        return total


class InterpolantFlowMap(ConditionedMap):
    """Exact flow map of the linear interpolant path for the coupling x_t = (I + C) x_s:
    Phi_{tau0,tau1}(y) = (I + tau1 C)(I + tau0 C)^{-1} y."""

    def __init__(self, C, fault_dim=0):
        C = np.atleast_2d(np.asarray(C, dtype=float))
        super().__init__(C.shape[0], fault_dim)
        self.register_buffer("C", torch.as_tensor(C, dtype=DTYPE))

    def displacement(self, x, tau0, tau1, cond):
        eye = torch.eye(self.state_dim, dtype=DTYPE)
        lhs = eye + tau0[..., None] * self.C
        y = torch.linalg.solve(lhs, x.unsqueeze(-1)).squeeze(-1)
        return y @ self.C.T


class ConstantDisplacement(ConditionedMap):
    """Delta = c, the exact map for translation couplings x_t = x_s + c."""

    def __init__(self, c, fault_dim=0):
        c = np.atleast_1d(np.asarray(c, dtype=float))
        super().__init__(len(c), fault_dim)
        self.register_buffer("c", torch.as_tensor(c, dtype=DTYPE))

    def displacement(self, x, tau0, tau1, cond):
        return self.c.expand_as(x)


def build_model(descriptor):
    kw = {k: v for k, v in descriptor.items() if k != "class"}
    if descriptor["class"] == "FlowMapModel":
        return FlowMapModel(**kw)
    if descriptor["class"] == "MetricModel":
        return MetricModel(**kw)
    raise ValueError(f"unknown model class {descriptor['class']}")
