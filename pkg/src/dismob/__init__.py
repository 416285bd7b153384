"""Physics-guided diffusion generator for disaster-period human mobility.

Synthetic cities with known decay physics serve as ground truth; a
conditional denoising-diffusion model over trajectory embeddings is guided by
a fitted hyperbolic spatiotemporal decay law, trained across cities with a
shared/private meta-learning loop, and scored with distributional and
decay-structure metrics.
"""

__version__ = "0.1.0"
