//! JSON-lines logging: one object per event, fields flattened to the top
//! level so traces such as per-iteration fusion energies are easy to parse.

use std::fs::OpenOptions;
use std::path::Path;
use std::sync::Mutex;

use tracing::Dispatch;
use tracing_subscriber::fmt::writer::BoxMakeWriter;

use crate::error::{Error, Result};
use crate::fusion::FusionReport;

pub enum LogTarget<'a> {
    Stderr,
    /// Appends to the file, creating it if needed.
    File(&'a Path),
    Off,
}

pub fn dispatch(target: LogTarget) -> Result<Dispatch> {
    let writer = match target {
        LogTarget::Stderr => BoxMakeWriter::new(std::io::stderr),
        LogTarget::File(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            }
            let file = OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
            BoxMakeWriter::new(Mutex::new(file))
        }
        LogTarget::Off => BoxMakeWriter::new(std::io::sink),
    };
    let subscriber = tracing_subscriber::fmt()
        .json()
        .flatten_event(true)
        .with_current_span(false)
        .with_span_list(false)
        .with_target(false)
        .with_writer(writer)
        .finish();
    Ok(Dispatch::new(subscriber))
}

/// One `fusion_iteration` event per outer iteration.
pub fn log_fusion_report(report: &FusionReport) {
    for r in &report.iterations {
        tracing::info!(
            event = "fusion_iteration",
            iteration = r.iteration,
            e_net = r.e_net,
            e_orth = r.e_orth,
            e_cons = r.e_cons,
            total = r.total,
            frozen_before = r.frozen_before,
            frozen_after = r.frozen_after,
            correspondences = r.correspondences,
            mean_correspondences = r.mean_correspondences,
            outliers_removed = r.outliers_removed,
            solver_iterations = r.solver_iterations,
            solver_residual = r.solver_residual,
            solver_converged = r.solver_converged,
        );
    }
    if report.solver_warning {
        tracing::warn!(event = "solver_cap", message = "a linear solve stopped at its iteration cap");
    }
}
