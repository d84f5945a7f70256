"""Whole-body trajectory planning for differential-drive mobile manipulators.

Modules:
    world     procedural scenarios, 2D grid ESDF, analytic 3D box SDF
    topo      roadmap construction and topologically distinct base paths
    robot     kinematics, collision geometry, flat-output integration
    traj      piecewise quintic minimum-jerk trajectories and transforms
    optim     L-BFGS and augmented-Lagrangian cores
    objective trajectory optimization problem assembly
    pipeline  end-to-end planning, candidate selection, validation
    cli       command-line entry points
"""

__version__ = "0.1.0"
