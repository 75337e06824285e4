"""Shape and SVBRDF recovery from flash-lit polarization captures.

Pipeline: simulate (or ingest) captures through a linear polarizer at
0/45/90 degrees, extract the normalized Stokes direction cue and the
diffuse-color cue, then recover diffuse/specular albedo, roughness, normals
and depth by gradient descent on an analytically differentiable polarized
rendering loss. Includes the synthetic dataset generator and the L1
evaluation protocol.
"""

__version__ = "0.1.0"
