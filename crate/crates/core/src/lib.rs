//! Model gradient similarity (MGS) training laboratory.
//!
//! The crate computes per-sample gradient kernels of small neural networks,
//! tracks their trace and log-determinant during training, and implements
//! kernel penalties next to classical regularisers.

pub mod autodiff;
pub mod container;
pub mod datasets;
pub mod error;
pub mod graph;
pub mod kernel;
pub mod linalg;
pub mod loss;
pub mod models;
pub mod regularisers;
pub mod scenarios;
pub mod tensor;
pub mod trainer;

pub use container::{Container, CONTAINER_VERSION};
pub use datasets::{
    flip_labels, load_idx, motion_blur, motion_blur_kernel, proportional_counts, stratified_sample,
    synthetic_regression, two_circles, Corruption, Dataset, Split,
};
pub use error::{Error, Result};
pub use graph::{
    dropout_mask, DropoutStream, ForwardContext, Graph, GraphBuilder, GraphNode, LayerKind, PerSampleJacobian,
    DEFAULT_JACOBIAN_CAP_BYTES,
};
pub use kernel::{
    alignment, anomaly_score, batch_kernel, batch_trace, interlacing_check, logdet_metric, mgs_kernel,
    predicted_update, spectrum, trace_metric, trace_metric_jacobian, GradientKernel, InterlacingReport, ScatterPair,
    DEFAULT_RANK_TOL,
};
pub use loss::{argmax_rows, LossKind, Targets};
pub use models::{build, init, ArchKind, ArchSpec, InitSpec};
pub use regularisers::{
    lossgrad_input_penalty, lossgrad_param_penalty, mgs_logdet_penalty, mgs_trace_penalty, penalty_gradient,
    penalty_value, regularised_loss_and_grad, weight_penalty, weight_penalty_gradient, PenaltyKind,
    RegularisedGradient, RegulariserConfig, RegulariserKind,
};
pub use scenarios::DataSource;
pub use tensor::{ParamSlot, ParamVector, Tensor};
pub use trainer::{
    aggregate, batch_plan, derive_seed, evaluate, grid_search, kernel_metrics, mean_std, metric_schedule, quantile,
    results_csv, robustness_sweep, run_seed, run_testbench, sgd_update, step_context, sweep_csv, train, DataProvider,
    GridPoint, GridSearchResult, Metric, MetricBatch, MetricRow, MetricTrace, Scenario, ScenarioResult, StepReport,
    SweepAxis, SweepBase, SweepRow, TrainConfig, TrainRun, TrainState, FINAL_WINDOW,
};
