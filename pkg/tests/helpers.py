"""Shared builders for tests."""
import numpy as np

from comal import dynamics as dyn
from comal import network as net


def uniform_ring_world(n=22, length=230.0, speed_limit=30.0, noise_std=0.0,
                       seed=0, cav_indices=(), vehicle_length=5.0):
    """Evenly spaced vehicles on a ring at the gap's equilibrium speed.

    Links are installed with one exact gap value per vehicle, the same way
    scenario instantiation does it.
    """
    network = net.build_ring(length, speed_limit)
    params = dyn.human_params(speed_limit)
    spacing = length / n
    veq = dyn.equilibrium_speed(params, spacing - vehicle_length)
    w = dyn.World(network, seed=seed)
    for i in range(n):
        kind = "cav" if i in cav_indices else "human"
        state = dyn.VehicleState(
            id=f"{kind}_{i:02d}", route_id="loop",
            position=network.arc_to_lane("loop", i * spacing),
            speed=veq, length=vehicle_length, kind=kind, active_params=params)
        w.add_vehicle(state, noise_std if kind == "human" else 0.0)
    w.rebuild_links()
    w.set_links(w.lead_idx, np.full(n, spacing - vehicle_length))
    return w
