"""Trajectory tracking for skid-steered tracked vehicles.

Nominal first/second-order kinematic controllers on an offset output
point, a Gaussian-process-learned inverse model for terrain where the
nominal kinematics break down, a slip-afflicted tilted-plane plant, and a
CLI harness covering the simulate/collect/train/evaluate workflow.
"""

__version__ = "0.1.0"
