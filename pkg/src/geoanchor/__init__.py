"""Visual geo-localization toolkit for GNSS-denied UAV flight.

Satellite tile grids, VLAD place recognition, density-based outlier
rejection, gravity-aware trajectory anchoring and a planar Kalman filter,
plus a synthetic closed-loop simulator to exercise them together.
"""

__version__ = "0.1.0"
