"""Digital twin of a conical vision-based tactile sensor.

The package simulates the full sensing chain: parametric surface mesh and
embedded stiff lattice, probe contacts with a Hertz-type force law, a sparse
elastic surrogate for shell deformation, a structured-light fisheye renderer,
ground-truth force-distribution maps, an optimal pixel-to-node assignment, and
a small from-scratch convolutional regressor that inverts images back into
contact, force-map, and posture estimates.
"""

from tactwin.geometry import SensorGeometry, SurfaceMesh, SkeletonLattice, build_mesh, build_skeleton
from tactwin.contact import Indenter, ProbeProtocol, ContactEvent
from tactwin.forcemap import ForceProfile, ForceMap
from tactwin.optics import CameraModel, LightSource, SensorImage
from tactwin.assignment import PixelNodeAssignment

__version__ = "0.1.0"

__all__ = [
    "SensorGeometry",
    "SurfaceMesh",
    "SkeletonLattice",
    "build_mesh",
    "build_skeleton",
    "Indenter",
    "ProbeProtocol",
    "ContactEvent",
    "ForceProfile",
    "ForceMap",
    "CameraModel",
    "LightSource",
    "SensorImage",
    "PixelNodeAssignment",
    "__version__",
]
