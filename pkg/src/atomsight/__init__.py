"""Simulation, detection, and estimator variance floors for neutral-atom
lattice fluorescence images."""

from .benchmark import (
    GaussianPairFit,
    MetricsRow,
    classify_and_score,
    fit_class_distributions,
    fit_rate_slope,
    optimal_threshold,
    run_benchmark,
    time_detector,
)
from .bounds import (
    BoundReport,
    BoundScenario,
    FisherMatrix,
    PowerLawFit,
    bound_curves,
    bound_report,
    crb_variances,
    error_rate_floor,
    fisher_matrix,
    fn_rate_fit,
    make_scenario,
    power_law_fit,
)
from .detectors import (
    EstimateSet,
    GaussNewtonOptions,
    SolverState,
    deconvolution_readout,
    gauss_newton_solve,
    richardson_lucy,
    rl_detect,
    roi_sum,
    wiener_deconvolve,
    wiener_detect,
)
from .optics import (
    CameraModel,
    LatticeGeometry,
    PointSpreadFunction,
    Scene,
    build_gaussian_psf,
    collected_electron_rate,
    expected_electron_map,
    gamma_from_exposure,
    read_psf,
    write_psf,
)
from .pixelstats import (
    PdfAccumulator,
    PoissonSupport,
    pixel_pdf,
    pixel_pdf_partial,
    poisson_support,
)
from .simulate import (
    Dataset,
    Frame,
    generate_dataset,
    load_dataset,
    sample_frame,
    sample_occupancy,
    save_dataset,
)

__version__ = "0.1.0"
