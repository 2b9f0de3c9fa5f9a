mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let report = common::gradient_suite(20);
    eprintln!("{report:?}");
    assert!(report.passed(), "{report:?}");
}

#[test]
fn forward_agrees_with_reference_model() {
    for seed in 0..10 {
        let inst = common::LossInstance::random(seed, 8, 2, 5);
        let ctx = cmc_core::cmc::cmc_forward(&inst.params, &inst.query, &inst.candidates).unwrap();
        let fast = cmc_core::cmc::cmc_score(&ctx).unwrap().scores;
        let q: Vec<f64> = inst.query.iter().map(|&x| x as f64).collect();
        let c: Vec<Vec<f64>> = inst.candidates.iter().map(|v| v.iter().map(|&x| x as f64).collect()).collect();
        let slow = common::RefModel::from_params(&inst.params).scores(&q, &c);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((*a as f64 - b).abs() <= 1e-4 * b.abs().max(1.0), "{a} vs {b}");
        }
    }
}
