//! Same initial ensemble and data perturbations, two members per method:
//! unregularized-LM RML runs to its stationarity criterion while IR-enLM
//! stops at the noise level.

use irens::baselines::{rml_ensemble, RmlLmParams};
use irens::field::{build_spherical_covariance, factorize_prior, Field, SphericalCovarianceSpec};
use irens::ir_enlm::{run_ensemble, IrEnlmParams};
use irens::observations::{synthesize, NoiseDraw};
use irens::reservoir::{ReservoirForward, ReservoirModelConfig, WellModel};

fn main() -> irens::Result<()> {
    let config = ReservoirModelConfig::desk(WellModel::A);
    let g = config.geometry;
    let cov = build_spherical_covariance(&g, &SphericalCovarianceSpec::default())?;
    let prior = factorize_prior(Field::constant(g, (5e-13f64).ln()), cov)?;
    let truth = Field::new(g, prior.draw(&mut irens::rng::substream(1, &[])))?;
    let obs = synthesize(&truth, &config, 2, NoiseDraw::Sampled)?;
    let forward = ReservoirForward::new(&config, Default::default())?;
    let n_e = 4;

    let ir = run_ensemble(&prior, &obs, &IrEnlmParams::new(0.8, 1.0, n_e), &forward, 9)?;
    let rml = rml_ensemble(&prior, &obs, &RmlLmParams { n_e, ..Default::default() }, 9, &forward)?;
    for j in 0..n_e {
        let a = &ir.member_traces[j];
        let b = &rml.member_traces[j];
        println!("member {j}");
        println!(
            "  IR-enLM: {:>2} iterations, misfit {:.2} -> {:.2} (threshold {:.2})",
            a.iterations,
            a.misfits[0],
            a.misfits.last().unwrap(),
            a.threshold.unwrap()
        );
        println!(
            "  RML-LM : {:>2} steps ({} accepted), objective {:.1} -> {:.1}, bound met: {:?}",
            b.iterations,
            b.accepted.iter().filter(|x| **x).count(),
            b.objectives[0],
            b.objectives.last().unwrap(),
            b.objective_bound_met
        );
        println!("  distance between the two members: {:.3}", (&ir.members[j] - &rml.members[j]).norm());
    }
    println!(
        "forward calls: IR-enLM {}, RML {}",
        ir.forward_calls, rml.forward_calls
    );
    Ok(())
}
