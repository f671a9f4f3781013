"""Parameter algebra for the log-correlated field / LBM family.

Every other module takes a validated :class:`Params` and trusts it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import DomainError

__all__ = [
    "Params",
    "derive_q",
    "alpha_of_q",
    "alpha_critical",
    "c_of_d",
    "spectral_dimension_formula",
]


def _check_dim(d: int) -> None:
    if int(d) != d or d < 2:
        raise DomainError(f"dimension must be an integer >= 2, got {d!r}")


def derive_q(d: int, gamma: float) -> float:
    """Q = d/gamma + gamma/2, for gamma in (0, sqrt(2d)]."""
    _check_dim(d)
    if not (0.0 < gamma <= math.sqrt(2 * d)):
        raise DomainError(f"gamma must lie in (0, sqrt(2d)] = (0, {math.sqrt(2 * d):.6g}], got {gamma!r}")
    return d / gamma + gamma / 2.0


def alpha_of_q(q: float) -> float:
    """Smaller root of 2/a + a/2 = q. Requires q > 2."""
    if not q > 2.0:
        raise DomainError(f"no subcritical LBM exponent for Q <= 2 (got Q={q!r})")
    # q - sqrt(q^2 - 4) loses digits for large q; 4/(q + sqrt(q^2-4)) is the same root.
    return 4.0 / (q + math.sqrt(q * q - 4.0))


def alpha_critical(d: int) -> float:
    _check_dim(d)
    return math.sqrt(2 * d) - math.sqrt(2 * d - 4)


def c_of_d(d: int) -> float:
    """Normalising constant Gamma(d/2) / (2 sqrt(pi) Gamma((d-1)/2))."""
    _check_dim(d)
    return math.exp(math.lgamma(d / 2) - math.lgamma((d - 1) / 2)) / (2.0 * math.sqrt(math.pi))


def potential_exponent(alpha: float, beta: float) -> float:
    """2 + alpha^2/2 - alpha*beta, the small-scale exponent of the alpha-measure."""
    return 2.0 + 0.5 * alpha * alpha - alpha * beta


def spectral_dimension_formula(d: int, alpha: float, beta: float) -> float:
    _check_dim(d)
    den = potential_exponent(alpha, beta)
    if den <= 0.0:
        raise DomainError(f"2 + a^2/2 - a*b = {den:.6g} <= 0: potential diverges")
    return 2.0 + 2.0 * (d - 2) / den


@dataclass(frozen=True)
class Params:
    """Validated parameter bundle.

    Construct through :meth:`Params.make`; the raw constructor does not
    recompute derived fields.
    """

    d: int
    gamma: float
    beta: float
    q_val: float
    alpha: float
    alpha_c: float
    c_d: int | None
    even_only_flag: bool

    @classmethod
    def make(cls, d: int, gamma: float, beta: float = 0.0) -> "Params":
        _check_dim(d)
        d = int(d)
        gamma = float(gamma)
        if not (0.0 < gamma < math.sqrt(2 * d)):
            raise DomainError(f"gamma must lie in (0, sqrt(2d)) for a subcritical bundle, got {gamma!r}")
        q = derive_q(d, gamma)
        beta = float(beta)
        if not beta < q:
            raise DomainError(f"beta must be < Q = {q:.6g}, got {beta!r}")
        alpha = alpha_of_q(q)
        even = d % 2 == 0
        return cls(
            d=d,
            gamma=gamma,
            beta=beta,
            q_val=q,
            alpha=alpha,
            alpha_c=alpha_critical(d),
            c_d=(d - 2) // 2 if even else None,
            even_only_flag=even and d >= 4,
        )

    @property
    def drift(self) -> float:
        """Q - beta, the drift of the cone recentring."""
        return self.q_val - self.beta

    @property
    def chi_bar(self) -> float:
        return (self.d - 2) / potential_exponent(self.alpha, self.beta)

    @property
    def spectral_dimension(self) -> float:
        return spectral_dimension_formula(self.d, self.alpha, self.beta)

    def require_even(self) -> int:
        if not self.even_only_flag:
            raise DomainError(f"operation needs even d >= 4, got d={self.d}")
        return self.c_d  # type: ignore[return-value]

    def as_dict(self) -> dict:
        return {
            "d": self.d,
            "gamma": self.gamma,
            "beta": self.beta,
            "q_val": self.q_val,
            "alpha": self.alpha,
            "alpha_c": self.alpha_c,
            "c_d": self.c_d,
            "even_only_flag": self.even_only_flag,
        }
