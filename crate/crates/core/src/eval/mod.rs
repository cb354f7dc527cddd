//! Evaluation against held-out stations: binned RMSE tables, improvement
//! over the IDW baseline, error histograms and field maps.

mod evaluate;
mod metrics;
mod render;

pub use evaluate::{
    eval_slices, evaluate, standard_error, BinKey, EvalProtocol, EvalReport, EvalSlice, IdwBaseline,
    MetricsRow, MetricsTable, ModelPredictor, Predictor,
};
pub use metrics::{angular_error, error_histogram, mean_abs_err, percent_improvement, rmse, ErrorStats, Metric};
pub use render::{encode_pgm, overlay_wind, render_field_map, wind_arrows};
