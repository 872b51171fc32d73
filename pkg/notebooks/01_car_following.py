"""
Car following: human drivers and the Follower Stopper
=====================================================

Evaluates the human car-following law and the Follower Stopper speed
command on a few hand-picked states, then runs the two-vehicle gap
recovery scenario with and without the recovery term.
"""

import numpy as np

from mixedav.controllers import (
    FollowerStopperParams,
    IdmParams,
    forced_gap_error,
    fs_command_velocity,
    idm_accel,
    region_boundaries,
)

# Human drivers: accelerations for a closing and an opening situation.
idm = IdmParams()
print("closing on a slower leader:", idm_accel(20.0, 30.0, 18.0, idm))
print("free road at 15 m/s:", idm_accel(15.0, np.inf, 15.0, idm))

# The Follower Stopper blends between stopping and tracking U across three
# gap boundaries that widen when the leader is slower.
fs = FollowerStopperParams()
for dv in (0.0, -3.0):
    print(f"boundaries at dv={dv}:", region_boundaries(dv, fs))
gaps = np.linspace(0.0, 20.0, 9)
print("command vs gap at v = v_lead = 8, U = 10:")
for g in gaps:
    print(f"  gap {g:5.1f} m -> {fs_command_velocity(8.0, g, 8.0, 10.0, fs):.3f}")

# Gap recovery: hold the AV at half speed for 10 s, then release it.
t, gap, x3 = forced_gap_error(fs)
_, gap0, _ = forced_gap_error(FollowerStopperParams(c=0.0))
for k in range(0, len(t), 100):
    print(f"t={t[k]:6.1f}s  with recovery {gap[k] - x3:6.2f} m  "
          f"without {gap0[k] - x3:6.2f} m above x3")
