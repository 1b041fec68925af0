"""Fuse partial anatomical label predictions, refine them with anatomical rules, and validate the result."""
from .components import ComponentSet, connected_components, keep_largest
from .fuse import SourceMapping, apply_remap_rules, derive_skull, fuse_sources
from .geometry import Hyperplane, body_part_boxes, fit_plane, plane_axis_deviation, surface_distance
from .labelscheme import LabelScheme, default_scheme, load_scheme, opposite_sex_labels
from .metrics import PatientMeta, jsd, overlap_metrics, quadratic_fit, structure_stats
from .phantom import PhantomSpec, default_phantom_spec, generate
from .refine import RefineConfig, RefineReport, post_process
from .volgrid import IntensityVolume, LabelVolume, VolumeGeometry, read_volume, slice_count_filter, write_volume

__version__ = "0.1.0"
