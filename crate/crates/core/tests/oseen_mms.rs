use hookean_mkv::oseen::{run_flow, FlowParams, Forcing, OseenSolver, VelocityField};
use hookean_mkv::TensorGrid;

fn exact(x: f64, y: f64) -> [f64; 2] {
    let (sx, sy) = (1.0 - x * x, 1.0 - y * y);
    [-4.0 * y * sx * sx * sy, 4.0 * x * sx * sy * sy]
}

// −μΔu + ∇(xy) for the field above with μ = 1
fn forcing(x: f64, y: f64) -> [f64; 2] {
    let (x2, y2) = (x * x, y * y);
    [
        -24.0 * x2 * x2 * y - 48.0 * x2 * y2 * y + 96.0 * x2 * y + 16.0 * y2 * y - 40.0 * y + y,
        48.0 * x2 * x * y2 - 16.0 * x2 * x + 24.0 * x * y2 * y2 - 96.0 * x * y2 + 40.0 * x + x,
    ]
}

fn steady_error(n: usize) -> f64 {
    let g = TensorGrid::uniform(-1.0, 1.0, n, 2).unwrap();
    let solver = OseenSolver::new(&g, FlowParams::new(1.0).unwrap()).unwrap();
    let f = Forcing::from_fn(&g, forcing).unwrap();
    let u0 = VelocityField::zeros(&g, 0.0).unwrap();
    let traj = run_flow(&solver, &u0, 6.0, 0.05, 120, |_| Some(f.clone())).unwrap();
    let u = &traj.last().unwrap().0;
    u.l2_distance(&VelocityField::from_fn(&g, 0.0, exact).unwrap())
}

#[test]
fn manufactured_steady_flow_converges_at_second_order() {
    let (e1, e2) = (steady_error(16), steady_error(32));
    let rate = (e1 / e2).log2();
    eprintln!("errors {e1:e} {e2:e} rate {rate}");
    assert!(rate >= 1.8, "rate {rate}");
}
