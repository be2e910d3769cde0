"""Multi-carrier MISO downlink channel state and radio parameters."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConstructionError, DomainError

# Channel realisations come from a counter-based generator so a seed maps to
# the same numbers on every platform and numpy version that ships Philox.
RNG_NAME = "numpy.Philox"
FORMAT_VERSION = 1


def dbm_to_watt(dbm: float) -> float:
    return 10.0 ** ((dbm - 30.0) / 10.0)


@dataclass(frozen=True)
class SystemConfig:
    M: int
    K: int
    N: int
    B: float = 1e6
    P: float = 1.0
    sigma2: float = 1e-9
    pathloss: tuple[float, ...] | None = None

    def __post_init__(self):
        for name in ("M", "K", "N"):
            if int(getattr(self, name)) < 1:
                raise ConstructionError(f"{name} must be positive")
        if self.B <= 0 or self.sigma2 <= 0 or self.P < 0:
            raise ConstructionError("bandwidth and noise power must be positive, power nonnegative")
        if self.pathloss is not None:
            pl = tuple(float(b) for b in self.pathloss)
            if len(pl) != self.K or any(b < 0 for b in pl):
                raise ConstructionError("need one nonnegative path loss per user")
            object.__setattr__(self, "pathloss", pl)

    @property
    def beta(self) -> np.ndarray:
        return np.ones(self.K) if self.pathloss is None else np.asarray(self.pathloss)

    def replace(self, **kw) -> "SystemConfig":
        d = dict(M=self.M, K=self.K, N=self.N, B=self.B, P=self.P,
                 sigma2=self.sigma2, pathloss=self.pathloss)
        d.update(kw)
        return SystemConfig(**d)


@dataclass(frozen=True)
class ChannelState:
    """``h[k, n]`` is the length-M downlink channel of user k on subcarrier n."""

    h: np.ndarray
    seed: int | None = None
    config: SystemConfig | None = field(default=None, compare=False)

    def __post_init__(self):
        h = np.asarray(self.h, dtype=np.complex128)
        if h.ndim != 3 or not np.all(np.isfinite(h)):
            raise ConstructionError("channel must be a finite K x N x M complex array")
        h.setflags(write=False)
        object.__setattr__(self, "h", h)

    @property
    def K(self) -> int:
        return self.h.shape[0]

    @property
    def N(self) -> int:
        return self.h.shape[1]

    @property
    def M(self) -> int:
        return self.h.shape[2]

    def subcarrier(self, n: int) -> np.ndarray:
        """K x M matrix whose rows are h_{k,n}^H."""
        return self.h[:, n, :].conj()


def sample_channels(config: SystemConfig, seed: int) -> ChannelState:
    """i.i.d. CN(0, 1) entries scaled by sqrt(beta_k)."""
    rng = np.random.Generator(np.random.Philox(seed))
    shape = (config.K, config.N, config.M)
    g = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2.0)
    g *= np.sqrt(config.beta)[:, None, None]
    return ChannelState(g, seed=seed, config=config)


def received_power(h, w) -> float:
    """|h^H w|^2."""
    h = np.asarray(h)
    w = np.asarray(w)
    if h.shape != w.shape:
        raise DomainError(f"length mismatch {h.shape} vs {w.shape}")
    return float(abs(np.vdot(h, w)) ** 2)


def gains(channel: ChannelState, w: np.ndarray) -> np.ndarray:
    """``G[k, j, n] = |h_{k,n}^H w_{j,n}|^2`` for beams ``w`` of shape (J, N, M)."""
    inner = np.einsum("knm,jnm->kjn", channel.h.conj(), w)
    return inner.real**2 + inner.imag**2


def save_channels(path, state: ChannelState) -> None:
    """Write ``state`` to an ``.npz`` archive with a JSON header."""
    cfg = state.config
    header = {
        "format": "rsvr-channel",
        "version": FORMAT_VERSION,
        "rng": RNG_NAME,
        "seed": state.seed,
        "shape": list(state.h.shape),
        "config": None if cfg is None else {
            "M": cfg.M, "K": cfg.K, "N": cfg.N, "B": cfg.B, "P": cfg.P,
            "sigma2": cfg.sigma2, "pathloss": cfg.pathloss,
        },
    }
    with open(Path(path), "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header)), re=state.h.real, im=state.h.imag)


def load_channels(path) -> ChannelState:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format") != "rsvr-channel":
            raise ConstructionError(f"{path} is not a channel dump")
        h = z["re"] + 1j * z["im"]
    cfg = header.get("config")
    config = None
    if cfg is not None:
        config = SystemConfig(**{**cfg, "pathloss": tuple(cfg["pathloss"]) if cfg["pathloss"] else None})
    return ChannelState(h, seed=header.get("seed"), config=config)
