//! Volume ingestion, the end-to-end two-stage run and its exporters.

mod export;
mod normalize;
mod run;
mod volume;

pub use export::{
    render_slice, render_slice_ppm, Axis, ClusterVolume, MeanFunctions, CIVL_MAGIC, CIVL_VERSION,
    PALETTE,
};
pub use normalize::{denormalize, normalize_columns};
pub use run::{
    choose_slope, files, finish, fit_file, prepare, run_to_dir, run_two_stage, sweep, Prepared,
    RunConfig, RunOutput, SelectionReport, SlopeSource, Sweep, SweepFit,
};
pub use volume::{load_volume, Dims, VolumeFormat, VolumeSeries, CIVT_MAGIC, CIVT_VERSION};
