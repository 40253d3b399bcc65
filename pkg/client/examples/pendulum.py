"""Swing an analytic pendulum and log every step.

The telemetry footprint is exactly two lines: the handle construction
and the in-loop log_state call. Endpoint comes from VIZAREL_ENDPOINT.

State is (sin theta, cos theta, theta_dot) for a small-angle pendulum
theta(t) = theta0 cos(omega t), so the trajectory is exact rather than
integrated and the logged values can be checked in closed form.
"""
import math
import sys

from vizarel_client import VizarelState

STEPS = 200
DT = 0.05
THETA0 = 0.4
OMEGA = 3.0


def main() -> int:
    viz = VizarelState(steps=STEPS, obs_dim=[3], action_dim=[1], reward_dim=1)
    for t in range(STEPS):
        theta = THETA0 * math.cos(OMEGA * t * DT)
        theta_dot = -THETA0 * OMEGA * math.sin(OMEGA * t * DT)
        obs = [math.sin(theta), math.cos(theta), theta_dot]
        reward = -(theta * theta + 0.1 * theta_dot * theta_dot)
        viz.log_state(1, [obs], [[0.0]], [reward], [t == STEPS - 1])
    return viz.close()


if __name__ == "__main__":
    dropped = main()
    print(f"logged {STEPS} steps, {dropped} dropped")
    sys.exit(1 if dropped else 0)
