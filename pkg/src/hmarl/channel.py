"""Deterministic specular-lobe propagation model for tile reflectors.

Every tile contributes ``A * G(psi) / (d1 * d2) * exp(-j*2*pi*(d1 + d2)/lambda)``
where ``d1`` is the AP-tile distance, ``d2`` the tile-user distance and ``psi``
the angle between the mirror-reflected ray and the tile-to-user direction.
A weak through-wall path completes the sum, and received power is
``P_t * |sum(h) + h_other|**2``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import InvalidArgument
from .geometry import TileGrid, as_vec3, tile_normals

log = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
DBM_FLOOR = -140.0
_EPS = 1e-12


def dbm_to_mw(dbm):
    return np.power(10.0, np.asarray(dbm, dtype=np.float64) / 10.0)


def mw_to_dbm(mw, floor: float = DBM_FLOOR):
    """Convert milliwatts to dBm, flooring zero or tiny powers at ``floor``."""
    mw = np.asarray(mw, dtype=np.float64)
    with np.errstate(divide="ignore"):
        out = 10.0 * np.log10(mw)
    out = np.maximum(out, floor)
    return float(out) if out.ndim == 0 else out


def lobe_exponent(beamwidth: float) -> float:
    """Exponent ``m`` with ``cos(beamwidth)**m = sqrt(0.5)``.

    The amplitude lobe ``cos(psi)**m`` then has half power at ``psi = beamwidth``.
    """
    return float(np.log(0.5) / (2.0 * np.log(np.cos(beamwidth))))


def calibrated_aperture(tx_power_dbm: float = 5.0, target_dbm: float = -65.0, num_tiles: int = 63, distance: float = 5.0) -> float:
    """Per-tile amplitude giving ``target_dbm`` from ``num_tiles`` tiles at ``distance``.

    Uses the incoherent power sum with AP and user both ``distance`` from the
    array, so ``P_t * num_tiles * (A / distance**2)**2`` hits the target.
    """
    ratio = dbm_to_mw(target_dbm - tx_power_dbm)
    return float(np.sqrt(ratio * distance ** 4 / num_tiles))


@dataclass(frozen=True)
class ChannelParams:
    """Propagation constants.

    Args:
        carrier_freq: Carrier frequency in Hz.
        tx_power: Transmit power in dBm.
        wall_loss: Attenuation in dB applied to the free-space AP-user path.
            ``inf`` removes the path.
        tile_gain_beamwidth: Half-power half-angle of a tile's lobe, radians.
        aperture: Per-tile amplitude constant ``A``. ``None`` calibrates it.
    """

    carrier_freq: float = 60e9
    tx_power: float = 5.0
    wall_loss: float = 25.0
    tile_gain_beamwidth: float = float(np.deg2rad(10.0))
    aperture: float | None = None
    _lobe_m: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not (np.isfinite(self.carrier_freq) and self.carrier_freq > 0):
            raise InvalidArgument(f"carrier_freq must be positive, got {self.carrier_freq}")
        if not (0 < self.tile_gain_beamwidth < np.pi / 2):
            raise InvalidArgument(f"tile_gain_beamwidth must lie in (0, pi/2), got {self.tile_gain_beamwidth}")
        if self.wall_loss < 0:
            raise InvalidArgument(f"wall_loss must be >= 0 dB, got {self.wall_loss}")
        if self.aperture is None:
            object.__setattr__(self, "aperture", calibrated_aperture(self.tx_power))
        elif not self.aperture > 0:
            raise InvalidArgument(f"aperture must be positive, got {self.aperture}")
        object.__setattr__(self, "_lobe_m", lobe_exponent(self.tile_gain_beamwidth))

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_freq

    @property
    def lobe_m(self) -> float:
        return self._lobe_m

    @property
    def tx_power_mw(self) -> float:
        return float(dbm_to_mw(self.tx_power))

    def to_dict(self) -> dict:
        return {
            "carrier_freq": self.carrier_freq,
            "tx_power": self.tx_power,
            "wall_loss": self.wall_loss,
            "tile_gain_beamwidth_deg": float(np.rad2deg(self.tile_gain_beamwidth)),
            "aperture": self.aperture,
        }


@dataclass(frozen=True)
class PowerReading:
    rssi_dbm: float
    rssi_mw: float

    @classmethod
    def from_mw(cls, mw: float) -> "PowerReading":
        mw = float(mw)
        if not np.isfinite(mw) or mw < 0:
            raise InvalidArgument(f"received power must be finite and >= 0, got {mw}")
        return cls(mw_to_dbm(mw), mw)


def tile_coefficients(tiles: np.ndarray, normals: np.ndarray, ap: np.ndarray, users: np.ndarray, params: ChannelParams) -> np.ndarray:
    """Complex coefficients for every (tile, user) pair.

    Args:
        tiles: ``(N, 3)`` tile centres.
        normals: ``(N, 3)`` unit normals; zero rows mark inactive tiles.
        ap: ``(3,)`` access point.
        users: ``(K, 3)`` user positions.
        params: Channel constants.

    Returns:
        ``(N, K)`` complex array.
    """
    to_ap = ap - tiles
    d1 = np.linalg.norm(to_ap, axis=-1)
    to_user = users[None, :, :] - tiles[:, None, :]
    d2 = np.linalg.norm(to_user, axis=-1)
    ok = (d1[:, None] > _EPS) & (d2 > _EPS)
    safe_d1 = np.where(d1 > _EPS, d1, 1.0)
    safe_d2 = np.where(d2 > _EPS, d2, 1.0)
    u_in = -to_ap / safe_d1[:, None]
    u_out = to_user / safe_d2[..., None]

    n_dot_ap = -np.einsum("ij,ij->i", u_in, normals)
    n_dot_user = np.einsum("nkj,nj->nk", u_out, normals)
    ok &= (n_dot_ap[:, None] > 0) & (n_dot_user > 0)

    # mirror the incident direction about the tile normal
    reflected = u_in + 2.0 * n_dot_ap[:, None] * normals
    cos_psi = np.clip(np.einsum("nkj,nj->nk", u_out, reflected), -1.0, 1.0)
    gain = np.where(cos_psi > 0, np.abs(cos_psi) ** params.lobe_m, 0.0)

    total = d1[:, None] + d2
    k = 2.0 * np.pi / params.wavelength
    h = params.aperture * gain / (safe_d1[:, None] * safe_d2) * np.exp(-1j * k * total)
    return np.where(ok, h, 0.0 + 0.0j)


def tile_coefficient(tile_pos, tile_normal, ap, user, params: ChannelParams) -> complex:
    """Coefficient of a single tile; degenerate or back-facing geometry gives 0."""
    t = as_vec3(tile_pos, "tile_pos")
    n = as_vec3(tile_normal, "tile_normal")
    h = tile_coefficients(t[None], n[None], as_vec3(ap, "ap"), as_vec3(user, "user")[None], params)[0, 0]
    if h == 0:
        log.debug("tile %s contributes nothing toward user %s", t, user)
    return complex(h)


def segment_field(tiles: np.ndarray, focal: np.ndarray, ap: np.ndarray, users: np.ndarray, params: ChannelParams) -> np.ndarray:
    """Summed coefficient of one focused segment toward each of ``users``."""
    normals, _ = tile_normals(tiles, focal, ap)
    return tile_coefficients(tiles, normals, ap, users, params).sum(axis=0)


def other_path(ap: np.ndarray, users: np.ndarray, params: ChannelParams) -> np.ndarray:
    """Free-space AP-user coefficient attenuated by ``wall_loss`` dB."""
    users = np.atleast_2d(users)
    if np.isinf(params.wall_loss):
        return np.zeros(len(users), dtype=complex)
    d = np.linalg.norm(users - ap, axis=-1)
    d = np.where(d > _EPS, d, _EPS)
    lam = params.wavelength
    amp = lam / (4.0 * np.pi * d) * 10.0 ** (-params.wall_loss / 20.0)
    return amp * np.exp(-1j * 2.0 * np.pi * d / lam)


def power_mw(field_sum, params: ChannelParams) -> np.ndarray:
    return params.tx_power_mw * np.abs(field_sum) ** 2


def received_power(user, assigned_segments: Sequence[tuple[TileGrid, int, np.ndarray]], ap, params: ChannelParams) -> PowerReading:
    """Coherent power at ``user`` from every listed ``(grid, segment, focal)``."""
    u = as_vec3(user, "user")[None]
    s = as_vec3(ap, "ap")
    total = other_path(s, u, params)[0]
    for grid, seg, focal in assigned_segments:
        total += segment_field(grid.segment_tiles(seg), as_vec3(focal, "focal"), s, u, params)[0]
    return PowerReading.from_mw(power_mw(total, params))


def field_matrix(segment_tiles: Sequence[np.ndarray], focals: np.ndarray, ap: np.ndarray, users: np.ndarray, params: ChannelParams) -> np.ndarray:
    """``S[l, k]``: summed field of segment ``l`` (focused at ``focals[l]``) at user ``k``."""
    return np.stack([segment_field(t, f, ap, users, params) for t, f in zip(segment_tiles, focals)])


def user_powers(field: np.ndarray, allocation: Sequence[int], ap, users, params: ChannelParams) -> np.ndarray:
    """Per-user mW given ``S[l, k]`` and a segment-to-user allocation."""
    users = np.atleast_2d(users)
    K = len(users)
    mask = np.zeros(field.shape, dtype=bool)
    mask[np.arange(len(allocation)), np.asarray(allocation)] = True
    total = (field * mask).sum(axis=0) + other_path(np.asarray(ap, float), users, params)
    return power_mw(total[:K], params)


def system_reward(users, allocation: Sequence[int], segments: Sequence[tuple[TileGrid, int]], focals, ap, params: ChannelParams) -> float:
    """Sum of linear received powers (mW) over all users.

    Args:
        users: ``(K, 3)`` true user positions.
        allocation: User id served by each segment, length ``L``.
        segments: ``(grid, segment)`` pairs, length ``L``.
        focals: ``(L, 3)`` focal points.
        ap: Access point position.
        params: Channel constants.
    """
    users = np.atleast_2d(np.asarray(users, dtype=np.float64))
    if len(allocation) != len(segments):
        raise InvalidArgument(f"allocation has {len(allocation)} entries for {len(segments)} segments")
    if any(not 0 <= b < len(users) for b in allocation):
        raise InvalidArgument(f"allocation {list(allocation)} references a missing user")
    ap = as_vec3(ap, "ap")
    tiles = [g.segment_tiles(s) for g, s in segments]
    field = field_matrix(tiles, np.asarray(focals, dtype=np.float64), ap, users, params)
    return float(user_powers(field, allocation, ap, users, params).sum())
