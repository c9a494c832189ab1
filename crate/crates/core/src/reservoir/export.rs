use std::io::Write;
use std::path::Path;

use super::{ReservoirModelConfig, SimTrajectory, WellKind};
use crate::error::{Error, Result};
use crate::io::write_field;
use crate::observations::MeasurementKind;

/// One field binary per step (`pressure_NNN.f64`, `saturation_NNN.f64`)
/// plus `well_records.csv`. Returns the written paths.
pub fn write_trajectory(
    dir: &Path,
    traj: &SimTrajectory,
    config: &ReservoirModelConfig,
) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (k, (p, s)) in traj.pressures.iter().zip(&traj.saturations).enumerate() {
        let pp = dir.join(format!("pressure_{:03}.f64", k + 1));
        write_field(&pp, p)?;
        let sp = dir.join(format!("saturation_{:03}.f64", k + 1));
        write_field(&sp, s)?;
        written.push(pp);
        written.push(sp);
    }
    let csv = dir.join("well_records.csv");
    write_well_records_csv(&csv, traj, config)?;
    written.push(csv);
    Ok(written)
}

pub fn write_well_records_csv(
    path: &Path,
    traj: &SimTrajectory,
    config: &ReservoirModelConfig,
) -> Result<()> {
    let mut out = String::from("well_id,kind,step,time_s,value,units\n");
    for (k, w) in config.wells.iter().enumerate() {
        let kind = match w.kind {
            WellKind::Injector => "injector",
            WellKind::Producer => "producer",
        };
        let units = match config.measurement_kind(w) {
            MeasurementKind::Bhp => "Pa",
            _ => "m3/day",
        };
        for (step, v) in traj.well_records[k].iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{:e},{:e},{}\n",
                w.name,
                kind,
                step + 1,
                traj.times_s[step],
                v,
                units
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}
