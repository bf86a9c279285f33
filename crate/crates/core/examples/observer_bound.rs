//! Observer error energy against its bound, with the input gate at 1 and 0.5.

use nalgebra::DVector;
use smr_lab::etc::{observer_bound_check, observer_noise, ObserverSystem, SimGrid};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sys = ObserverSystem::reference();
    let grid = SimGrid::default();
    let points = grid.steps()? + 1;
    let u: Vec<_> = (0..points).map(|k| DVector::from_element(1, grid.time(k).sin())).collect();
    let x0 = DVector::from_vec(vec![1.0, 0.0]);
    println!("premise |PA| <= 1 and |P| <= 1: {}", sys.premise_holds());
    for seed in 0..3 {
        let eps = observer_noise(points, 1, 0.1, seed);
        let full = observer_bound_check(&sys, &vec![1.0; points], &u, &eps, &grid, &x0, &x0)?;
        let half = observer_bound_check(&sys, &vec![0.5; points], &u, &eps, &grid, &x0, &x0)?;
        println!(
            "seed {seed}: min slack {:.2e} / {:.2e}, mean bound h=1 {:.4e}, h=0.5 {:.4e}",
            full.min_slack, half.min_slack, full.rhs_mean, half.rhs_mean
        );
    }
    Ok(())
}
