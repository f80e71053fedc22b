"""nanotile: fixed-point CNN inference, tiling planner, memory planner,
cycle/power model, offload protocol simulator and control loop for a
nano-drone visual navigation engine."""

__version__ = "0.1.0"
