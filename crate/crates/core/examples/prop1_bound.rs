//! Output error caused by input noise against the geometric accumulation
//! bound, for a contracting and an expanding transition matrix.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smr_lab::nss::{prop1_bound_check, Prop1Input};
use smr_lab::ssm::DiscreteSsm;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let len = 200;
    let u = DMatrix::from_fn(1, len, |_, k| (k as f64 * 0.05).sin());
    let eps = DMatrix::from_fn(1, len, |_, _| rng.gen_range(-0.01..0.01));
    for lambda in [0.9, 1.05] {
        let model = DiscreteSsm::from_matrices(
            DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![lambda, 0.5 * lambda])),
            DMatrix::from_column_slice(2, 1, &[1.0, 0.5]),
            DMatrix::from_row_slice(1, 2, &[0.7, -0.3]),
        )?;
        let r = prop1_bound_check(&model, &u, &eps, Prop1Input::tight(&model, &u))?;
        let t = len - 1;
        println!(
            "|lambda_max| = {:.2}: error at step {t} = {:.3e}, bound = {:.3e}",
            r.lambda_max.value, r.realized[t], r.bound[t]
        );
    }
    Ok(())
}
