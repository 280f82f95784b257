use p4c::harness::experiment::{run_arm, P4CONTRAST_HYBRID};

fn window_mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn default_run_descends() {
    let r = run_arm(P4CONTRAST_HYBRID, 1).unwrap();
    assert_eq!(r.loss.len(), 2000);
    assert!(r.loss.iter().all(|l| l.is_finite()));
    let first = window_mean(&r.loss[..100]);
    let last = window_mean(&r.loss[r.loss.len() - 100..]);
    assert!(last < first, "{last} >= {first}");
    assert_eq!(r.probe.iou.len(), 8);
    assert!(r.lr.windows(2).all(|w| w[1] <= w[0]));
    assert!(r.hardness_bound.windows(2).all(|w| w[1] >= w[0]));
}
