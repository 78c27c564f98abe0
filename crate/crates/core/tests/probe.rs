use mld_mpc::cartpole::{build_controller, CartPoleParams};
use mld_mpc::sim::{run_closed_loop, ErrorModel, Mode, SimOptions};
use nalgebra::DVector;
use std::time::Instant;

#[test]
fn probe_loops() {
    let (ctrl, _) = build_controller(&CartPoleParams::default(), 20).unwrap();
    let x0 = DVector::from_row_slice(&[0.0, 0.0, 1.0, 0.0]);
    for c in [0.0, 1e-3] {
        let err = ErrorModel::new(c, ctrl.stage_scale(), 0);
        for mode in [Mode::Warm, Mode::Cold] {
            let t = Instant::now();
            let opts = SimOptions { mode, ..Default::default() };
            let trace = run_closed_loop(&ctrl, &x0, 50, &err, 0, &opts).unwrap();
            let qp: Vec<usize> = trace.steps.iter().map(|s| s.qp_count).collect();
            let total: usize = qp.iter().sum();
            let xn = trace.steps.last().map(|s| s.state.amax()).unwrap_or(f64::NAN);
            println!(
                "c={c:.0e} {mode}: {:?} infeas={} total_qp={total} last|x|={xn:.4} qp={qp:?}",
                t.elapsed(), trace.infeasible_termination
            );
        }
    }
}
