"""Proportional-gain sweep for the DC motor position loop, printed as CSV.

Shows the library API without the agent loop: build a plant, simulate a
controller under a scenario and compute the step-response metrics.
"""
import csv
import sys

import numpy as np

from ctrlagents.controllers import ControllerSpec
from ctrlagents.metrics import compute_metrics
from ctrlagents.plants import make_plant
from ctrlagents.scenarios import default_ladder
from ctrlagents.simulator import default_sim, run_episode


def main() -> None:
    plant = make_plant("dc_motor")
    scenario = default_ladder("dc_motor")[0]
    sim = default_sim("dc_motor")
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["Kp", "mse", "settling_time", "overshoot", "zero_crossings"])
    for kp in np.arange(5.0, 60.01, 2.5):
        m = compute_metrics(run_episode(plant, ControllerSpec("P", {"Kp": float(kp)}), scenario, sim))
        w.writerow([f"{kp:g}", f"{m.mse:.4f}", f"{m.settling_time:.2f}", f"{m.overshoot:.2f}", m.zero_crossings])


if __name__ == "__main__":
    main()
