use lasso_ate::estimators::Method;
use lasso_ate::sim::{generate_population, run_replication, SimulationConfig};

#[test]
fn saturated_lasso_arm_does_not_fail_lasso_ols() {
    let mut cfg = SimulationConfig::reference(500, 1000, 1);
    cfg.methods = vec![Method::Unadjusted, Method::CvLasso, Method::CvLassoOls];
    let pop = generate_population(&cfg).unwrap();
    let records = run_replication(&pop, &cfg, 543);
    let error = |m: Method| records.iter().find(|r| r.method == m).unwrap().error.clone();
    assert!(error(Method::Unadjusted).is_none());
    let lasso = error(Method::CvLasso).expect("cv(Lasso) control support saturates");
    assert!(lasso.contains("degrees of freedom 125"), "{lasso}");
    assert_eq!(error(Method::CvLassoOls), None);
}
