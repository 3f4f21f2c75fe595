"""Published aggregate figures used as fixtures.

Rescan averages per protocol: probe packets, probe MB, response packets
(millions), response MB, then the printed packet and volume factors.
"""

MB = 1_000_000

RESCAN_AVERAGES = {
    "DNS": (60_511, 6.1, 1.8, 132.6, 30, 22),
    "ICMP": (107_912, 3.0, 103.5, 7_271.6, 959, 2_424),
    "TCP443": (241_353, 9.7, 2.7, 144.2, 11, 15),
    "TCP25": (85_687, 3.4, 1.6, 89.0, 19, 26),
    "TCP80": (298_379, 11.9, 3.2, 167.7, 11, 14),
    "NTP": (56_149, 4.3, 21.0, 1_585.2, 374, 369),
}

# Full-scan multipacket packet types: total, then five shares in percent.
DNS_PACKET_TYPES = (4_686_571, (4.34, 36.66, 29.25, 26.18, 3.57))
