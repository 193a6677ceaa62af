"""Multi-modal 3D tumor segmentation on synthetic phantoms.

Three modality-specific segmentation branches feed a main branch through
spatial-channel attention fusion; training combines region Dice losses with
a containment constraint between nested tumor regions. Everything runs on a
small numpy-backed reverse-mode autodiff engine.
"""

__version__ = "0.1.0"
