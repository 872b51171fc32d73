"""
String instability on a ring road
=================================

Twenty-two human drivers on a 260 m ring start at equal spacing. With
driver noise the uniform flow breaks into a stop-and-go wave; without it
the symmetric state persists.
"""

import numpy as np

from mixedav.controllers import IdmParams
from mixedav.network import NetworkSpec, SimConfig, init_network, step

spec = NetworkSpec(topology="ring", length_m=260.0, num_lanes=1,
                   ring_vehicles=22)

for label, idm in (("noisy", IdmParams()),
                   ("noise-free", IdmParams(noise_std=0.0))):
    cfg = SimConfig(idm=idm, seed=0, warmup_s=0.0, penetration=0.0)
    state = init_network(spec, cfg)
    spread = []
    for k in range(int(1500 / cfg.dt)):
        step(state, spec, cfg)
        spread.append(np.std(state.speed))
    spread = np.array(spread)
    crossed = np.argmax(spread > 2.0) if np.any(spread > 2.0) else None
    when = "never" if crossed is None else f"{(crossed + 1) * cfg.dt:.0f} s"
    print(f"{label}: max speed std {spread.max():.3g} m/s, "
          f"exceeds 2 m/s at {when}")
