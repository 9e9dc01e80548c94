"""Unit conversions.

Everything inside the package is SI: meters, seconds, vehicles.  Traffic
customary units (km/h, veh/h, veh/km) exist only at the I/O boundary.
"""

MPS_PER_KMH = 1.0 / 3.6
VPS_PER_VPH = 1.0 / 3600.0


def kmh_to_mps(v):
    return v * MPS_PER_KMH


def mps_to_kmh(v):
    return v / MPS_PER_KMH


def vph_to_vps(c):
    return c * VPS_PER_VPH


def vps_to_vph(c):
    return c / VPS_PER_VPH
