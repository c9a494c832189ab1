//! Draws log-permeability fields from the desk prior and prints their
//! whitened statistics and a coarse ASCII rendering of the first one.

use irens::field::{
    build_spherical_covariance, factorize_prior, sample_prior, Field, GridGeometry,
    SphericalCovarianceSpec,
};

fn main() -> irens::Result<()> {
    let geometry = GridGeometry::new(20, 20, 2000.0, 2000.0)?;
    let spec = SphericalCovarianceSpec::default();
    let cov = build_spherical_covariance(&geometry, &spec)?;
    let prior = factorize_prior(Field::constant(geometry, (5e-13f64).ln()), cov)?;

    let fields = sample_prior(&prior, 42, 4);
    for (k, f) in fields.iter().enumerate() {
        let z = prior.whiten(&(&f.values - &prior.mean.values))?;
        let n = z.len() as f64;
        let mean = z.sum() / n;
        let var = z.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let (lo, hi) = f.values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
            (a.min(*v), b.max(*v))
        });
        println!(
            "sample {k}: ln k in [{lo:.2}, {hi:.2}], whitened mean {mean:+.3}, variance {var:.3}"
        );
    }

    // Major axis along y: expect vertical streaks.
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    let f = &fields[0];
    let m = prior.mean.values[0];
    println!("\nsample 0 (row j = ny-1 at the top):");
    for j in (0..geometry.ny).rev() {
        let row: String = (0..geometry.nx)
            .map(|i| {
                let t = ((f.at(i, j) - m) / 2.5 + 0.5).clamp(0.0, 0.999);
                shades[(t * shades.len() as f64) as usize]
            })
            .collect();
        println!("  {row}");
    }
    Ok(())
}
