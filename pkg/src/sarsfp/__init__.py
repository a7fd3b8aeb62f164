"""Physical-domain adversarial examples for ray-traced SAR imagery.

Scenes are triangle meshes carrying per-facet scattering parameters; a
black-box finite-difference attack perturbs blend coefficients that pull
those parameters toward the background until a classifier is fooled.
"""
__version__ = "0.1.0"
