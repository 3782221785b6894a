"""Dynamic part-based visual tracker.

Target parts are feature-grid cells, dynamically updated against a pseudo
template via multi-head attention, localized by a shared MLP under
attention-guided supervision, and converted to a bounding box from the
part-location distribution.
"""

__version__ = "0.1.0"
