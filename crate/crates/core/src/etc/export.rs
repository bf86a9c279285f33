use std::fmt::Write;

use super::EtcTrajectory;

/// CSV with header `t,x1..xn,u1..um,LV,e_norm,triggered`.
pub fn trajectory_csv(traj: &EtcTrajectory) -> String {
    let n = traj.states.first().map_or(0, |x| x.len());
    let m = traj.controls.first().map_or(0, |u| u.len());
    let mut out = String::from("t");
    for i in 1..=n {
        let _ = write!(out, ",x{i}");
    }
    for i in 1..=m {
        let _ = write!(out, ",u{i}");
    }
    out.push_str(",LV,e_norm,triggered\n");
    for k in 0..traj.times.len() {
        let _ = write!(out, "{}", traj.times[k]);
        for v in traj.states[k].iter().chain(traj.controls[k].iter()) {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{},{},{}", traj.lyapunov[k], traj.e_norm[k], u8::from(traj.triggered[k]));
    }
    out
}

/// Trigger times as a JSON array.
pub fn triggers_json(traj: &EtcTrajectory) -> String {
    serde_json::to_string(&traj.trigger_times()).expect("floats serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::etc::{simulate_etc, EtcPlant, SimGrid};
    use nalgebra::DVector;

    #[test]
    fn csv_shape() {
        let grid = SimGrid { t_end: 0.05, ..Default::default() };
        let traj = simulate_etc(&EtcPlant::corrected(), &grid, &DVector::from_vec(vec![1.0, 0.0]), false).unwrap();
        let csv = trajectory_csv(&traj);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "t,x1,x2,u1,LV,e_norm,triggered");
        assert_eq!(lines.len(), 7);
        assert!(lines[1].ends_with(",1"));
        assert!(lines.iter().skip(1).all(|l| l.split(',').count() == 7));
        let times: Vec<f64> = serde_json::from_str(&triggers_json(&traj)).unwrap();
        assert_eq!(times[0], 0.0);
    }
}
