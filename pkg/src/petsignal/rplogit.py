"""Fixed and random-parameter ordered logit by (simulated) maximum likelihood.

Latent index ``eta = constant + x'beta``; level ``j`` of ``J`` has
probability ``F(k_j - eta) - F(k_{j-1} - eta)`` with ``F`` the logistic CDF,
``k_0 = -inf`` and ``k_J = +inf``. With a constant the first threshold is
pinned at 0, leaving ``J - 2`` free thresholds reported as ``kappa.1`` ...

Random coefficients are independent normals, ``beta_k + sigma_k * w``;
the simulated likelihood averages the per-group product of probabilities
over ``R`` scrambled Halton draws shared by all groups.
"""
from __future__ import annotations

import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import optimize, special, stats

from .errors import InvalidInputError, SchemaError

PROB_FLOOR = 1e-300
_CHUNK_ELEMENTS = 262_144
_PRIMES = (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71, 73, 79, 83, 89, 97)


@dataclass(frozen=True)
class ModelSpec:
    response: str = "pet_level"
    fixed: tuple[str, ...] = ()
    random: tuple[str, ...] = ()
    constant: bool = True
    draws: int = 500
    seed: int = 0
    group_key: str = "pair_id"
    levels: int = 5
    max_iter: int = 500

    def __post_init__(self) -> None:
        object.__setattr__(self, "fixed", tuple(self.fixed))
        object.__setattr__(self, "random", tuple(self.random))
        overlap = set(self.fixed) & set(self.random)
        if overlap:
            raise InvalidInputError(f"covariates listed as both fixed and random: {sorted(overlap)}")
        if len(set(self.fixed)) != len(self.fixed) or len(set(self.random)) != len(self.random):
            raise InvalidInputError("duplicate covariate names")
        if self.draws < 1:
            raise InvalidInputError("draws must be at least 1")
        if self.levels < 2:
            raise InvalidInputError("an ordered response needs at least 2 levels")

    @property
    def covariates(self) -> tuple[str, ...]:
        return self.fixed + self.random

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        random = d.get("random", [])
        if isinstance(random, Mapping):
            bad = {k: v for k, v in random.items() if str(v).lower() != "normal"}
            if bad:
                raise SchemaError(f"only normal random coefficients are supported: {bad}")
            random = list(random)
        known = {"response", "fixed", "random", "constant", "draws", "seed", "group_key", "levels", "max_iter"}
        extra = set(d) - known - {"fix_sigma_zero"}
        if extra:
            raise SchemaError(f"unknown model keys: {sorted(extra)}")
        kw = {k: d[k] for k in known & set(d) if k not in ("random", "fixed")}
        fixed = tuple(d.get("fixed", ()))
        if d.get("fix_sigma_zero"):
            # random covariates with sigma held at 0 are ordinary fixed slopes
            return cls(fixed=fixed + tuple(random), random=(), **kw)
        return cls(fixed=fixed, random=tuple(random), **kw)

    def to_dict(self) -> dict:
        return {
            "response": self.response,
            "fixed": list(self.fixed),
            "random": {r: "normal" for r in self.random},
            "constant": self.constant,
            "draws": self.draws,
            "seed": self.seed,
            "group_key": self.group_key,
            "levels": self.levels,
            "max_iter": self.max_iter,
        }


@dataclass
class OrderedParams:
    """Natural-scale parameters. ``thresholds`` holds all ``J - 1`` cut points."""

    constant: float
    beta: dict[str, float]
    thresholds: tuple[float, ...]
    sigma: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        th = np.asarray(self.thresholds, dtype=float)
        if np.any(np.diff(th) <= 0):
            raise InvalidInputError("thresholds must be strictly increasing")
        if any(not v >= 0 for v in self.sigma.values()):
            raise InvalidInputError("sigma values must be non-negative")


# --- probabilities ------------------------------------------------------------------------


def _log1mexp(a: np.ndarray) -> np.ndarray:
    """log(1 - exp(a)) for a <= 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a > -math.log(2.0), np.log(-np.expm1(a)), np.log1p(-np.exp(a)))


def _log_interval(u: np.ndarray, l: np.ndarray) -> np.ndarray:
    """log(F(u) - F(l)) for u > l, accurate in both tails."""
    with np.errstate(invalid="ignore"):
        direct = special.log_expit(u) + _log1mexp(special.log_expit(l) - special.log_expit(u))
        upper = special.log_expit(-l) + _log1mexp(special.log_expit(-u) - special.log_expit(-l))
    return np.where(l > 0, upper, direct)


def _log_density(z: np.ndarray) -> np.ndarray:
    return special.log_expit(z) + special.log_expit(-z)


def ordered_probs(eta, thresholds: Sequence[float]) -> np.ndarray:
    """Probabilities of every level, shape ``eta.shape + (J,)``."""
    cuts = np.r_[-np.inf, np.asarray(thresholds, dtype=float), np.inf]
    eta = np.asarray(eta, dtype=float)
    u = cuts[1:] - eta[..., None]
    l = cuts[:-1] - eta[..., None]
    return np.exp(_log_interval(u, l))


def ordered_prob(x, params: OrderedParams, level: int) -> float:
    """P(y = level | x) with ``x`` a mapping or a sequence ordered like ``params.beta``."""
    J = len(params.thresholds) + 1
    if not (isinstance(level, (int, np.integer)) and 1 <= level <= J):
        raise InvalidInputError(f"level must be an integer in 1..{J}, got {level}")
    names = list(params.beta)
    xv = [x[n] for n in names] if isinstance(x, Mapping) else list(x)
    if len(xv) != len(names):
        raise InvalidInputError(f"expected {len(names)} covariates, got {len(xv)}")
    eta = params.constant + sum(float(a) * params.beta[n] for a, n in zip(xv, names))
    return float(ordered_probs(eta, params.thresholds)[level - 1])


# --- data and parameter layout -----------------------------------------------------------------


@dataclass(frozen=True)
class OrderedData:
    """Design arrays sorted by group; ``starts`` indexes each group's first row."""

    y: np.ndarray
    X: np.ndarray
    names: tuple[str, ...]
    n_random: int
    starts: np.ndarray
    levels: int

    @property
    def n(self) -> int:
        return len(self.y)

    @property
    def n_groups(self) -> int:
        return len(self.starts)

    @property
    def X_random(self) -> np.ndarray:
        return self.X[:, len(self.names) - self.n_random :]

    @classmethod
    def from_frame(cls, df: pd.DataFrame, spec: ModelSpec) -> "OrderedData":
        needed = [spec.response, *spec.covariates]
        if spec.random or spec.group_key in df.columns:
            needed.append(spec.group_key)
        missing = [c for c in needed if c not in df.columns]
        if missing:
            raise SchemaError(f"data missing column(s): {', '.join(missing)}")
        if len(df) == 0:
            raise InvalidInputError("no observations")
        if spec.group_key in df.columns:
            codes, _ = pd.factorize(df[spec.group_key], sort=True)
        else:
            codes = np.arange(len(df))
        order = np.argsort(codes, kind="stable")
        y = pd.to_numeric(df[spec.response], errors="coerce").to_numpy(dtype=float)[order]
        if np.any(~np.isfinite(y)) or np.any(y != np.round(y)) or y.min() < 1 or y.max() > spec.levels:
            raise InvalidInputError(f"response must be integer levels in 1..{spec.levels}")
        X = df[list(spec.covariates)].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)[order]
        if not np.all(np.isfinite(X)):
            raise InvalidInputError("covariates contain missing or non-numeric values")
        sc = codes[order]
        starts = np.flatnonzero(np.r_[True, sc[1:] != sc[:-1]])
        return cls(
            y=y.astype(np.int64),
            X=np.ascontiguousarray(X),
            names=spec.covariates,
            n_random=len(spec.random),
            starts=starts,
            levels=spec.levels,
        )


@dataclass(frozen=True)
class ParamLayout:
    names: tuple[str, ...]
    n_random: int
    levels: int
    constant: bool

    @property
    def n_free_thresholds(self) -> int:
        return self.levels - 2 if self.constant else self.levels - 1

    @property
    def size(self) -> int:
        return int(self.constant) + len(self.names) + self.n_random + self.n_free_thresholds

    @property
    def random_names(self) -> tuple[str, ...]:
        return self.names[len(self.names) - self.n_random :]

    def labels(self) -> list[str]:
        out = ["constant"] if self.constant else []
        k_fixed = len(self.names) - self.n_random
        out += list(self.names[:k_fixed])
        out += [f"mean.{n}" for n in self.random_names]
        out += [f"sd.{n}" for n in self.random_names]
        out += [f"kappa.{i}" for i in range(1, self.n_free_thresholds + 1)]
        return out

    def unpack(self, theta: np.ndarray):
        i = 0
        c = 0.0
        if self.constant:
            c = theta[0]
            i = 1
        K = len(self.names)
        beta = theta[i : i + K]
        sigma = theta[i + K : i + K + self.n_random]
        free = theta[i + K + self.n_random :]
        cuts = np.r_[0.0, free] if self.constant else np.asarray(free, dtype=float)
        return c, beta, sigma, cuts

    def pack(self, p: OrderedParams) -> np.ndarray:
        head = [p.constant] if self.constant else []
        th = np.asarray(p.thresholds, dtype=float)
        if len(th) != self.levels - 1:
            raise InvalidInputError(f"need {self.levels - 1} thresholds, got {len(th)}")
        if self.constant and th[0] != 0.0:
            raise InvalidInputError("with a constant the first threshold must be 0")
        free = th[1:] if self.constant else th
        return np.r_[
            head,
            [p.beta[n] for n in self.names],
            [p.sigma.get(n, 0.0) for n in self.random_names],
            free,
        ].astype(float)

    def params(self, theta: np.ndarray) -> OrderedParams:
        c, beta, sigma, cuts = self.unpack(theta)
        return OrderedParams(
            constant=float(c),
            beta={n: float(b) for n, b in zip(self.names, beta)},
            thresholds=tuple(float(v) for v in cuts),
            sigma={n: float(abs(s)) for n, s in zip(self.random_names, sigma)},
        )

    # optimizer coordinates: thresholds as log increments so they stay ordered
    def to_raw(self, theta: np.ndarray) -> np.ndarray:
        nf = self.n_free_thresholds
        head, free = theta[: self.size - nf], theta[self.size - nf :]
        if self.constant:
            inc = np.diff(np.r_[0.0, free])
            return np.r_[head, np.log(inc)]
        return np.r_[head, free[:1], np.log(np.diff(free))]

    def from_raw(self, raw: np.ndarray) -> np.ndarray:
        nf = self.n_free_thresholds
        head, r = raw[: self.size - nf], raw[self.size - nf :]
        if self.constant:
            free = np.cumsum(np.exp(r))
        else:
            free = r[0] + np.r_[0.0, np.cumsum(np.exp(r[1:]))] if nf else r
        return np.r_[head, free]

    def raw_gradient(self, raw: np.ndarray, grad_nat: np.ndarray) -> np.ndarray:
        nf = self.n_free_thresholds
        g = grad_nat.copy()
        if nf == 0:
            return g
        gk = grad_nat[self.size - nf :]
        tail = np.cumsum(gk[::-1])[::-1]  # sum over thresholds at or above each index
        r = raw[self.size - nf :]
        if self.constant:
            g[self.size - nf :] = tail * np.exp(r)
        else:
            g[self.size - nf] = tail[0]
            g[self.size - nf + 1 :] = tail[1:] * np.exp(r[1:])
        return g


# --- likelihood engine ------------------------------------------------------------------------------


class _Engine:
    def __init__(self, data: OrderedData, layout: ParamLayout, omega: np.ndarray | None, prob_floor: float):
        self.data = data
        self.layout = layout
        self.omega = omega  # (R, n_random) standard normal draws, or None for the fixed model
        self.log_floor = math.log(prob_floor)
        R = 1 if omega is None else omega.shape[0]
        per_group = max(1, data.n // max(data.n_groups, 1))
        groups_per_chunk = max(1, _CHUNK_ELEMENTS // (R * per_group))
        bounds = list(range(0, data.n_groups, groups_per_chunk)) + [data.n_groups]
        self.chunks = [(g0, g1) for g0, g1 in zip(bounds, bounds[1:])]
        self.floor_hits = 0

    def _obs_slice(self, g0: int, g1: int) -> slice:
        s = self.data.starts
        return slice(int(s[g0]), int(s[g1]) if g1 < len(s) else self.data.n)

    def _eta(self, c: float, beta: np.ndarray, X: np.ndarray) -> np.ndarray:
        eta = np.full(X.shape[0], c, dtype=float)
        for k in range(X.shape[1]):
            eta = eta + X[:, k] * beta[k]
        return eta

    def _chunk(self, theta: np.ndarray, g0: int, g1: int, want_grad: bool):
        lay, d = self.layout, self.data
        c, beta, sigma, cuts = lay.unpack(theta)
        sl = self._obs_slice(g0, g1)
        X, y = d.X[sl], d.y[sl]
        seg = d.starts[g0:g1] - d.starts[g0]
        ext = np.r_[-np.inf, cuts, np.inf]
        eta = self._eta(c, beta, X)
        if self.omega is not None:
            Xr = X[:, X.shape[1] - d.n_random :]
            eta = eta[:, None]
            for k in range(d.n_random):
                eta = eta + Xr[:, k][:, None] * (sigma[k] * self.omega[:, k])[None, :]
            up, lo = ext[y][:, None], ext[y - 1][:, None]
        else:
            up, lo = ext[y], ext[y - 1]
        u, l = up - eta, lo - eta
        logp = _log_interval(u, l)
        floored = logp < self.log_floor
        if floored.any():
            self.floor_hits += int(floored.sum())
            logp = np.where(floored, self.log_floor, logp)

        S = np.add.reduceat(logp, seg, axis=0)
        if self.omega is None:
            ll_g = S
            weights = None
        else:
            m = S.max(axis=1)
            e = np.exp(S - m[:, None])
            ll_g = m + np.log(e.mean(axis=1))
            weights = e / e.sum(axis=1, keepdims=True)
        if not want_grad:
            return ll_g, None

        a_u = np.exp(_log_density(u) - logp)
        a_l = np.exp(_log_density(l) - logp)
        g_eta = a_l - a_u
        group_of = np.repeat(np.arange(g1 - g0), np.diff(np.r_[seg, len(y)]))
        if weights is not None:
            W = weights[group_of]
            g_eta_w = W * g_eta
            ge = g_eta_w.sum(axis=1)
            au, al = (W * a_u).sum(axis=1), (W * a_l).sum(axis=1)
        else:
            ge, au, al = g_eta, a_u, a_l
        cols = []
        if lay.constant:
            cols.append(ge)
        for k in range(X.shape[1]):
            cols.append(ge * X[:, k])
        if self.omega is not None:
            Xr = X[:, X.shape[1] - d.n_random :]
            for k in range(d.n_random):
                cols.append((g_eta_w * self.omega[:, k][None, :]).sum(axis=1) * Xr[:, k])
        J = d.levels
        first = 2 if lay.constant else 1  # first free threshold index
        for j in range(first, J):
            cols.append(np.where(y == j, au, 0.0) - np.where(y - 1 == j, al, 0.0))
        G = np.add.reduceat(np.stack(cols, axis=1), seg, axis=0)
        return ll_g, G

    def evaluate(self, theta: np.ndarray, want_grad: bool = False, threads: int = 1):
        theta = np.asarray(theta, dtype=float)
        if threads > 1 and len(self.chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda ch: self._chunk(theta, ch[0], ch[1], want_grad), self.chunks))
        else:
            parts = [self._chunk(theta, g0, g1, want_grad) for g0, g1 in self.chunks]
        ll = float(np.sum(np.concatenate([p[0] for p in parts])))
        if not want_grad:
            return ll
        grad = np.sum(np.concatenate([p[1] for p in parts], axis=0), axis=0)
        return ll, grad


def _warn_floor(engine: _Engine) -> None:
    if engine.floor_hits:
        warnings.warn(
            f"{engine.floor_hits} observed-level probabilities fell below the floor and were clamped",
            RuntimeWarning,
            stacklevel=3,
        )


def _layout_for(data: OrderedData, params: OrderedParams, constant: bool = True) -> ParamLayout:
    return ParamLayout(tuple(data.names), data.n_random, data.levels, constant)


def loglik_fixed(data: OrderedData, params: OrderedParams, *, prob_floor: float = PROB_FLOOR, threads: int = 1) -> float:
    """Sum of log probabilities of the observed levels; any sigma is ignored."""
    lay = _layout_for(data, params)
    eng = _Engine(data, lay, None, prob_floor)
    ll = eng.evaluate(lay.pack(params), threads=threads)
    _warn_floor(eng)
    return ll


def loglik_fixed_gradient(data: OrderedData, params: OrderedParams) -> np.ndarray:
    """Analytic gradient in natural coordinates (constant, slopes, sigma slots, free thresholds)."""
    lay = _layout_for(data, params)
    return _Engine(data, lay, None, PROB_FLOOR).evaluate(lay.pack(params), want_grad=True)[1]


def halton_sequence(dim: int, n: int, scramble_seed: int | None = None, burn_in: int = 10) -> np.ndarray:
    """``n`` Halton points in ``dim`` dimensions, skipping indices 0..burn_in.

    With ``scramble_seed`` each base gets a random permutation of its
    nonzero digits (zero stays fixed so values remain in (0, 1)).
    """
    if dim < 1 or n < 1:
        raise InvalidInputError("dim and n must be at least 1")
    if dim > len(_PRIMES):
        raise InvalidInputError(f"at most {len(_PRIMES)} dimensions supported")
    rng = None if scramble_seed is None else np.random.default_rng(scramble_seed)
    idx = np.arange(burn_in + 1, burn_in + 1 + n, dtype=np.int64)
    out = np.empty((n, dim))
    for d in range(dim):
        b = _PRIMES[d]
        perm = np.arange(b)
        if rng is not None:
            perm[1:] = rng.permutation(np.arange(1, b))
        k = idx.copy()
        val = np.zeros(n)
        scale = 1.0 / b
        while np.any(k > 0):
            val += perm[k % b] * scale
            k //= b
            scale /= b
        out[:, d] = val
    return out


def normal_draws(n_draws: int, dim: int, seed: int | None) -> np.ndarray:
    return stats.norm.ppf(halton_sequence(dim, n_draws, scramble_seed=seed))


def loglik_simulated(
    data: OrderedData,
    params: OrderedParams,
    spec: ModelSpec | None = None,
    *,
    draws: np.ndarray | None = None,
    prob_floor: float = PROB_FLOOR,
    threads: int = 1,
) -> float:
    """Simulated panel log-likelihood with draws shared across groups.

    ``draws`` (shape ``(R, n_random)``, standard normal) overrides the
    Halton draws that ``spec`` would generate.
    """
    lay = _layout_for(data, params)
    if data.n_random == 0:
        return loglik_fixed(data, params, prob_floor=prob_floor, threads=threads)
    if draws is None:
        if spec is None:
            raise InvalidInputError("need a spec or explicit draws")
        draws = normal_draws(spec.draws, data.n_random, spec.seed)
    draws = np.asarray(draws, dtype=float).reshape(-1, data.n_random)
    eng = _Engine(data, lay, draws, prob_floor)
    ll = eng.evaluate(lay.pack(params), threads=threads)
    _warn_floor(eng)
    return ll


def loglik_simulated_gradient(
    data: OrderedData, params: OrderedParams, spec: ModelSpec | None = None, *, draws: np.ndarray | None = None
) -> np.ndarray:
    """Analytic gradient of ``loglik_simulated`` in natural coordinates (sigma as a signed scale)."""
    lay = _layout_for(data, params)
    if data.n_random == 0:
        return loglik_fixed_gradient(data, params)
    if draws is None:
        if spec is None:
            raise InvalidInputError("need a spec or explicit draws")
        draws = normal_draws(spec.draws, data.n_random, spec.seed)
    draws = np.asarray(draws, dtype=float).reshape(-1, data.n_random)
    return _Engine(data, lay, draws, PROB_FLOOR).evaluate(lay.pack(params), want_grad=True)[1]


def information_criteria(loglik: float, k: int, n: int) -> tuple[float, float]:
    if n < 1 or k < 1:
        raise InvalidInputError("need n >= 1 and k >= 1")
    return 2.0 * k - 2.0 * loglik, k * math.log(n) - 2.0 * loglik


def odds_ratio(estimate: float) -> float:
    if not math.isfinite(estimate):
        raise InvalidInputError("estimate must be finite")
    return math.exp(estimate)


# --- estimation -------------------------------------------------------------------------------------


@dataclass
class FitResult:
    names: list[str]
    estimates: np.ndarray
    std_errors: np.ndarray
    z_values: np.ndarray
    p_values: np.ndarray
    odds_ratios: list[float | None]
    log_likelihood: float
    start_log_likelihood: float
    aic: float
    bic: float
    n_observations: int
    n_groups: int
    n_parameters: int
    converged: bool
    iterations: int
    gradient_norm: float
    se_available: bool
    message: str
    spec: ModelSpec

    def to_dict(self) -> dict:
        def num(v):
            v = float(v)
            return v if math.isfinite(v) else None

        return {
            "coefficients": [
                {
                    "name": n,
                    "estimate": num(e),
                    "odds_ratio": None if o is None else num(o),
                    "std_error": num(s),
                    "z_value": num(z),
                    "p_value": num(p),
                }
                for n, e, o, s, z, p in zip(
                    self.names, self.estimates, self.odds_ratios, self.std_errors, self.z_values, self.p_values
                )
            ],
            "log_likelihood": self.log_likelihood,
            "start_log_likelihood": self.start_log_likelihood,
            "aic": self.aic,
            "bic": self.bic,
            "n_observations": self.n_observations,
            "n_groups": self.n_groups,
            "n_parameters": self.n_parameters,
            "convergence": {
                "converged": self.converged,
                "iterations": self.iterations,
                "gradient_norm": self.gradient_norm,
                "message": self.message,
            },
            "se_available": self.se_available,
            "spec": self.spec.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def params(self) -> OrderedParams:
        lay = ParamLayout(self.spec.covariates, len(self.spec.random), self.spec.levels, self.spec.constant)
        return lay.params(self.estimates)

    def format_table(self, title: str | None = None) -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append(
            f"No. of Obs = {self.n_observations}, Log Likelihood = {self.log_likelihood:.1f}, "
            f"AIC = {self.aic:.0f}, BIC = {self.bic:.0f}"
        )
        lines.append(f"{'':<22}{'Estimate':>10}{'Odds ratio':>12}{'Std. error':>12}{'z-value':>10}{'Pr(>|z|)':>10}")
        for n, e, o, s, z, p in zip(
            self.names, self.estimates, self.odds_ratios, self.std_errors, self.z_values, self.p_values
        ):
            label = n.replace("mean.", "mean. ").replace("sd.", "std. dev ")
            stars = "" if not math.isfinite(p) else "***" if p < 0.001 else "**" if p < 0.01 else "*" if p < 0.05 else "." if p < 0.1 else ""
            o_txt = "-" if o is None else f"{o:.3f}"
            lines.append(f"{label:<22}{e:>10.3f}{o_txt:>12}{s:>12.3f}{z:>10.3f}{p:>10.3f} {stars}")
        if not self.converged:
            lines.append(f"WARNING: optimizer did not converge ({self.message})")
        return "\n".join(lines) + "\n"


def _start_values(data: OrderedData, lay: ParamLayout) -> np.ndarray:
    J = data.levels
    freq = np.array([(data.y <= j).mean() for j in range(1, J)])
    freq = np.clip(freq, 1e-4, 1 - 1e-4)
    freq = np.maximum.accumulate(freq + np.arange(J - 1) * 1e-6)
    logit = special.logit(freq)
    if lay.constant:
        c = -logit[0]
        cuts = logit + c
        inc = np.maximum(np.diff(cuts), 1e-2)
        free = np.cumsum(inc)
        head = [c]
    else:
        inc = np.maximum(np.diff(logit), 1e-2)
        free = logit[0] + np.r_[0.0, np.cumsum(inc)]
        head = []
    return np.r_[head, np.zeros(len(lay.names)), np.full(lay.n_random, 0.1), free].astype(float)


def _safe_exp(v: float) -> float:
    # separated data can push a slope past exp's range; report the ratio as infinite
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


def numerical_hessian(grad_fn, theta: np.ndarray) -> np.ndarray:
    """Central differences of an analytic gradient, step ``max(1e-4, 1e-4 |theta_i|)``."""
    theta = np.asarray(theta, dtype=float)
    P = len(theta)
    H = np.empty((P, P))
    for i in range(P):
        h = max(1e-4, 1e-4 * abs(theta[i]))
        tp, tm = theta.copy(), theta.copy()
        tp[i] += h
        tm[i] -= h
        H[:, i] = (grad_fn(tp) - grad_fn(tm)) / (2.0 * h)
    return 0.5 * (H + H.T)


def fit(data, spec: ModelSpec, *, threads: int = 1, prob_floor: float = PROB_FLOOR) -> FitResult:
    """Maximise the (simulated) log-likelihood with L-BFGS-B from a deterministic start.

    ``data`` is a DataFrame or an ``OrderedData``. Standard errors come from
    the inverse of a central-difference Hessian at the optimum.
    """
    od = data if isinstance(data, OrderedData) else OrderedData.from_frame(data, spec)
    if len(np.unique(od.y)) < 2:
        raise InvalidInputError("response needs at least two observed levels")
    lay = ParamLayout(spec.covariates, len(spec.random), spec.levels, spec.constant)
    omega = normal_draws(spec.draws, len(spec.random), spec.seed) if spec.random else None
    eng = _Engine(od, lay, omega, prob_floor)

    def value_grad_nat(theta):
        return eng.evaluate(theta, want_grad=True, threads=threads)

    def objective(raw):
        theta = lay.from_raw(raw)
        ll, g = value_grad_nat(theta)
        if not math.isfinite(ll):
            return 1e300, np.zeros_like(raw)
        return -ll, -lay.raw_gradient(raw, g)

    theta0 = _start_values(od, lay)
    ll0 = eng.evaluate(theta0, threads=threads)
    raw0 = lay.to_raw(theta0)
    res = optimize.minimize(
        objective,
        raw0,
        jac=True,
        method="L-BFGS-B",
        options={"maxiter": spec.max_iter, "ftol": 1e-9, "gtol": 1e-5, "maxcor": 20},
    )
    theta = lay.from_raw(res.x)
    ll = -float(res.fun)
    raw_grad_norm = float(np.max(np.abs(res.jac))) if len(res.jac) else 0.0
    converged = bool(res.success) and res.nit < spec.max_iter
    message = str(res.message)

    def grad_only(t):
        return value_grad_nat(t)[1]

    H = numerical_hessian(grad_only, theta)
    se = np.full(lay.size, np.nan)
    se_ok = False
    try:
        eig = np.linalg.eigvalsh(-H)
        if np.all(np.isfinite(eig)) and eig.min() > 1e-10 * max(1.0, eig.max()):
            cov = np.linalg.inv(-H)
            diag = np.diag(cov)
            if np.all(diag > 0):
                se = np.sqrt(diag)
                se_ok = True
    except np.linalg.LinAlgError:
        pass
    if not se_ok:
        message += "; Hessian singular or not negative definite, standard errors unavailable"

    labels = lay.labels()
    est = theta.copy()
    is_sd = np.array([n.startswith("sd.") for n in labels])
    est[is_sd] = np.abs(est[is_sd])
    with np.errstate(divide="ignore", invalid="ignore"):
        z = est / se
    p = 2.0 * stats.norm.sf(np.abs(z))
    ors = [None if (n == "constant" or n.startswith("kappa.")) else _safe_exp(e) for n, e in zip(labels, est)]
    k = lay.size
    aic, bic = information_criteria(ll, k, od.n)
    _warn_floor(eng)
    return FitResult(
        names=labels,
        estimates=est,
        std_errors=se,
        z_values=z,
        p_values=p,
        odds_ratios=ors,
        log_likelihood=ll,
        start_log_likelihood=float(ll0),
        aic=aic,
        bic=bic,
        n_observations=od.n,
        n_groups=od.n_groups,
        n_parameters=k,
        converged=converged,
        iterations=int(res.nit),
        gradient_norm=raw_grad_norm,
        se_available=se_ok,
        message=message,
        spec=spec,
    )
