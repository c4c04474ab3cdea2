"""Low-rank SPDE state-space modelling of multivariate spatio-temporal data.

Finite-element mesh construction, sparse Matérn precision assembly,
heterotopic Kalman filtering/smoothing, EM estimation with closed-form
updates, synthetic-data simulation, and spatial prediction with uncertainty.
"""

from . import em, fem, kalman, mesh, model, predict, study
from .em import EmConfig, FitResult, fit
from .fem import FemMatrices, Precision, assemble, folded_matern_1d, matern_cov, precision
from .kalman import FilterOutput, SmootherMoments, dense_oracle, kalman_filter, kalman_smooth
from .mesh import (
    Mesh,
    QualityReport,
    basis_row,
    decimate,
    delaunay_triangulate,
    extend_boundary,
    laplacian_smooth,
    mesh_quality,
    read_mesh,
    write_mesh,
)
from .model import (
    BasisCache,
    ModelParams,
    ObservationPanel,
    build_loading,
    simulate_exact,
    simulate_lowrank,
)
from .predict import ValidationReport, raster_map, validate
from .predict import predict as predict_point

__version__ = "0.1.0"
