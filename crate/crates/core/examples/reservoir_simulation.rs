//! Simulates the desk five-spot on a homogeneous field and on a prior draw
//! and prints the well data and solver diagnostics.

use irens::field::{build_spherical_covariance, factorize_prior, sample_prior, Field, SphericalCovarianceSpec};
use irens::reservoir::{simulate, ReservoirModelConfig, WellModel};

fn main() -> irens::Result<()> {
    for model in [WellModel::A, WellModel::B] {
        let config = ReservoirModelConfig::desk(model);
        let g = config.geometry;
        let cov = build_spherical_covariance(&g, &SphericalCovarianceSpec::default())?;
        let prior = factorize_prior(Field::constant(g, (5e-13f64).ln()), cov)?;
        let draw = sample_prior(&prior, 3, 1).remove(0);

        for (name, u) in [("homogeneous", prior.mean.clone()), ("prior draw", draw)] {
            let t = std::time::Instant::now();
            let traj = simulate(&u, &config)?;
            println!("== model {model:?}, {name} ({:.1} ms)", t.elapsed().as_secs_f64() * 1e3);
            print!("{:>6}", "day");
            for w in &config.wells {
                print!("{:>14}", w.name);
            }
            println!();
            for (s, time) in traj.times_s.iter().enumerate() {
                print!("{:>6.0}", time / 86_400.0);
                for rec in &traj.well_records {
                    print!("{:>14.4e}", rec[s]);
                }
                println!();
            }
            let worst_balance = (0..traj.times_s.len())
                .map(|s| traj.well_rates.iter().map(|r| r[s]).sum::<f64>().abs())
                .fold(0.0, f64::max);
            let worst_residual = traj.pressure_residuals.iter().cloned().fold(0.0, f64::max);
            let s_last = traj.saturations.last().unwrap();
            let swept = s_last.values.iter().filter(|s| **s > 1e-3).count();
            println!(
                "well-rate imbalance {worst_balance:.2e} m3/day, pressure residual {worst_residual:.2e}, \
                 sub-steps {:?}, swept cells {swept}/{}\n",
                traj.substeps,
                g.n_cells()
            );
        }
    }
    Ok(())
}
