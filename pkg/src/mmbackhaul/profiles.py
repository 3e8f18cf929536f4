"""Versioned numeric defaults for the two supported PHYs.

Bump PROFILE_VERSION whenever a default below changes; it is written into
every result file.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

from .framing import AggregationShape, FrameTiming, McsTable, RadioProfile, load_mcs_table, pack

PROFILE_VERSION = "1"

MSS_BYTES = 2200
TCPIP_HEADER_BYTES = 40
MSDU_BYTES = MSS_BYTES + TCPIP_HEADER_BYTES
ACK_MSDU_BYTES = 40


@dataclass(frozen=True)
class DutyCycleConstants:
    t_sl_min: float = 250e-6
    delta: float = 5e-6
    k_max: int = 1000
    latency_max: float = 8.0

    def __post_init__(self):
        if self.t_sl_min <= 0 or self.delta <= 0:
            raise ValueError("t_sl_min and delta must be positive")
        if self.k_max < 1:
            raise ValueError("k_max must be >= 1")
        if self.latency_max <= 0:
            raise ValueError("latency_max must be positive")


@dataclass(frozen=True)
class LinkBudget:
    g_tx: float = 30.0  # dBi
    g_rx: float = 30.0
    bandwidth_hz: float = 2.16e9
    noise_figure_db: float = 6.0
    # off-boresight discrimination (tx + rx sidelobes) between co-channel cells
    interferer_offset_db: float = -30.0

    @property
    def noise_dbm(self) -> float:
        return -174.0 + 10.0 * math.log10(self.bandwidth_hz) + self.noise_figure_db

    @property
    def gains(self) -> tuple[float, float]:
        return (self.g_tx, self.g_rx)

    @property
    def interferer_gains(self) -> tuple[float, float]:
        return (self.g_tx + self.interferer_offset_db, self.g_rx)


@dataclass(frozen=True)
class BerModel:
    """Exponential waterfall: BER = 1e-5 one dB above the MCS threshold."""

    anchor_ber: float = 1e-5
    anchor_margin_db: float = 1.0

    def __call__(self, sinr_db: float, sinr_min_db: float) -> float:
        if not math.isfinite(sinr_db):
            return 0.0 if sinr_db > 0 else 0.5
        g_min = 10 ** (sinr_min_db / 10)
        k = math.log(0.5 / self.anchor_ber) / (g_min * (10 ** (self.anchor_margin_db / 10) - 1))
        g = 10 ** (sinr_db / 10)
        return min(0.5, 0.5 * math.exp(-k * (g - g_min)))


@dataclass(frozen=True)
class SystemProfile:
    name: str
    table: McsTable = field(repr=False)
    timing: FrameTiming
    radio: RadioProfile
    constants: DutyCycleConstants
    budget: LinkBudget
    ber: BerModel = BerModel()
    msdu_bytes: int = MSDU_BYTES
    ack_msdu_bytes: int = ACK_MSDU_BYTES
    p_th_out: float = 1e-6
    tx_power_range: tuple[int, int] = (-10, 5)
    mcs_range: tuple[int, int] = (13, 24)
    n_channels: int = 4
    carrier_hz: float = 60.48e9
    atmos_db_per_km: float = 17.0
    # payload MSDUs per A-MSDU; None packs greedily to the A-MSDU cap
    payload_per_amsdu: int | None = 1

    def shapes(self, k: int) -> tuple[AggregationShape, AggregationShape]:
        """Payload and TCP-ack aggregation shapes for window ``k``."""
        return (
            pack(k, self.msdu_bytes, self.timing, self.payload_per_amsdu),
            pack(k, self.ack_msdu_bytes, self.timing),
        )

    def with_constants(self, **kw) -> "SystemProfile":
        return replace(self, constants=replace(self.constants, **kw))


DEFAULT_RADIO = RadioProfile(v_s=3.0, i_tx_max=2.776, i_rx=2.198, i_idle=0.420, i_sl=0.005)

TIMING_80211AD = FrameTiming(
    aifs=18e-6,
    sifs=3e-6,
    t_slot=5e-6,
    t_pre=2.473e-6,
    delim_bits=32,
    mpdu_header_bits=26 * 8,
    subframe_header_bits=14 * 8,
    fcs_bits=32,
    s_bar=24 * 8,
    s_ba=32 * 8,
    cw_min=16,
    cw_max=1024,
)

TIMING_80211AC = FrameTiming(
    aifs=43e-6,
    sifs=16e-6,
    t_slot=9e-6,
    t_pre=40e-6,
    delim_bits=32,
    mpdu_header_bits=26 * 8,
    subframe_header_bits=14 * 8,
    fcs_bits=32,
    s_bar=24 * 8,
    s_ba=32 * 8,
    cw_min=16,
    cw_max=1024,
    max_amsdu_bytes=11_454,
    max_ampdu_bytes=1_048_575,
)


def ieee80211ad(**overrides) -> SystemProfile:
    from .dutycycle import max_agg_len

    timing = overrides.pop("timing", TIMING_80211AD)
    table = overrides.pop("table", None) or load_mcs_table("80211ad")
    per = overrides.pop("payload_per_amsdu", 1)
    k_max = max_agg_len(MSDU_BYTES, timing, per_amsdu=per)
    return SystemProfile(
        name="80211ad",
        payload_per_amsdu=per,
        table=table,
        timing=timing,
        radio=overrides.pop("radio", DEFAULT_RADIO),
        constants=overrides.pop("constants", DutyCycleConstants(delta=timing.t_slot, k_max=k_max)),
        budget=overrides.pop("budget", LinkBudget()),
        **overrides,
    )


def ieee80211ac(**overrides) -> SystemProfile:
    from .dutycycle import max_agg_len

    timing = overrides.pop("timing", TIMING_80211AC)
    table = overrides.pop("table", None) or load_mcs_table("80211ac")
    per = overrides.pop("payload_per_amsdu", 1)
    k_max = max_agg_len(MSDU_BYTES, timing, per_amsdu=per)
    return SystemProfile(
        name="80211ac",
        payload_per_amsdu=per,
        table=table,
        timing=timing,
        radio=overrides.pop("radio", replace(DEFAULT_RADIO, p_tx_max=20.0)),
        constants=overrides.pop("constants", DutyCycleConstants(delta=timing.t_slot, k_max=k_max)),
        budget=overrides.pop("budget", LinkBudget(g_tx=20.0, g_rx=20.0, bandwidth_hz=80e6)),
        carrier_hz=overrides.pop("carrier_hz", 5.5e9),
        atmos_db_per_km=overrides.pop("atmos_db_per_km", 0.0),
        tx_power_range=overrides.pop("tx_power_range", (-10, 20)),
        mcs_range=overrides.pop("mcs_range", (0, 9)),
        **overrides,
    )


def get_profile(name: str, **overrides) -> SystemProfile:
    if name in ("80211ad", "ad"):
        return ieee80211ad(**overrides)
    if name in ("80211ac", "ac"):
        return ieee80211ac(**overrides)
    raise ValueError(f"unknown radio profile {name!r}")
