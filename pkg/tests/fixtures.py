"""Reference numbers reported for the full-size model.

They document the scale of the original system. Our band split differs,
so tests only record them and never compare against them.
"""

REFERENCE_FULL_MODEL = {"w": 16, "d": 12, "params": 4.81e6, "macs_per_s": 30.02e9}
REFERENCE_SMALLEST_MACS_PER_S = 1.44e9
REFERENCE_SUBNETWORK_COUNT = 192
