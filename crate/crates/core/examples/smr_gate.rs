//! The memory replay gate on a jittered sine: gate values, damped input, and
//! agreement of the gated model in scan and convolution form.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use smr_lab::smr::{smr_ssm_forward, ExecMode, SmrConfig, SmrGate};
use smr_lab::ssm::DiscreteSsm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let len = 100;
    let u = DMatrix::from_fn(1, len, |_, k| (5.0 * std::f64::consts::PI * k as f64 / len as f64).sin());
    let gate = SmrGate::random(1, &SmrConfig::default(), &mut ChaCha8Rng::seed_from_u64(1));
    // a slightly unstable mode, as produced by a poorly conditioned fit
    let model = DiscreteSsm::scalar(1.01, 1.0, 1.0);
    let scan = smr_ssm_forward(&model, &gate, &u, ExecMode::Scan)?;
    let conv = smr_ssm_forward(&model, &gate, &u, ExecMode::Conv)?;
    println!(
        "gate in [{:.3}, {:.3}], |u| max {:.3} -> gated {:.3}",
        scan.stats.min_gate, scan.stats.max_gate, scan.stats.input_max_abs, scan.stats.gated_max_abs
    );
    println!("scan vs conv: {:.2e}", (&scan.y - &conv.y).amax());
    let plain = smr_ssm_forward(&model, &SmrGate::neutral(1, 4), &u, ExecMode::Scan)?;
    println!(
        "peak |x| with learned-shape gate {:.3}, with constant 0.5 gate {:.3}",
        scan.trace.unwrap().max_norm(),
        plain.trace.unwrap().max_norm()
    );
    Ok(())
}
