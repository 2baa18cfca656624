"""Neural particle automata.

Particle systems that perceive their neighborhood through smoothed-particle
(SPH) operators and evolve under a small learned network. The package provides
the differentiable operator layer with hand-written reverse-mode gradients,
hash-grid neighbor search, rollout/backprop-through-time machinery, training
tasks, a CLI, and a live websocket service.
"""

from .kernels import KernelParams, poly6, poly6_grad, spiky_grad, spiky_jacobian
from .grid import HashGrid, build_grid, brute_force_neighbors
from . import ops
from .engine import (AdaptationNet, ParticleSystem, StepConfig, init_adaptation_net,
                     load_checkpoint, perceive, perception_width, rollout,
                     rollout_backward, save_checkpoint, step)

__version__ = "0.1.0"
