use vpo_core::algorithms::{build_run, run_online, CalibrationSource, EnvSpec, OnlineRunConfig, RegContextSource};
use vpo_core::experiment_io::{
    aggregate, parse_spec, read_aggregate, read_raw_file, run_spec, RunOptions, AGGREGATE_FILE, RAW_DIR,
};
use vpo_core::losses::{Sign, VpoConfig};
use vpo_core::token_mdp::{soft_backward_induction, token_jstar, TokenMdp, TreeShape};
use vpo_core::{AdamWConfig, SeededRng};

#[test]
fn spec_to_aggregate_matches_raw_files() {
    let dir = tempfile::tempdir().unwrap();
    let spec = parse_spec(
        r#"
kind = "offline-mab"
seeds = [3, 4, 5]
arm_count = 5
dataset_sizes = [5, 15, 40]
total_steps = 50

[[algorithm]]
id = "mle"
alpha = 0.0

[[algorithm]]
id = "vpo"
alpha = 1.0
"#,
    )
    .unwrap()
    .spec;
    let out = run_spec(
        &spec,
        &RunOptions {
            jobs: 2,
            output: Some(dir.path().to_path_buf()),
        },
    )
    .unwrap();
    assert!(out.manifest.all_succeeded());
    assert_eq!(out.manifest.cells.len(), 6);

    let mut rows = Vec::new();
    for cell in &out.manifest.cells {
        let path = dir.path().join(cell.raw_csv.as_ref().unwrap());
        let cell_rows = read_raw_file(&path).unwrap();
        assert!(cell_rows.iter().all(|r| r.seed == cell.seed && r.algorithm == cell.algorithm));
        let gaps: Vec<u64> = cell_rows
            .iter()
            .filter(|r| r.metric_name == "suboptimality_gap")
            .map(|r| r.x)
            .collect();
        assert_eq!(gaps, vec![5, 15, 40]);
        assert!(cell_rows
            .iter()
            .filter(|r| r.metric_name == "suboptimality_gap")
            .all(|r| r.metric_value >= -1e-9));
        rows.extend(cell_rows);
    }
    assert_eq!(aggregate(&rows).unwrap(), out.aggregate);
    let on_disk = read_aggregate(std::fs::File::open(dir.path().join(AGGREGATE_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, out.aggregate);
    assert!(on_disk.iter().all(|r| r.n == 3));
    assert_eq!(std::fs::read_dir(dir.path().join(RAW_DIR)).unwrap().count(), 6);
}

#[test]
fn online_alpha_zero_and_positive_share_data_streams() {
    let setup = build_run::<f64>(&EnvSpec::mab(6), 7).unwrap();
    let run = |alpha: f64| {
        run_online(&OnlineRunConfig {
            env: setup.env.clone(),
            reference: setup.reference.clone(),
            iterations: 30,
            batch_size: 5,
            inner_steps: 5,
            vpo: VpoConfig::new(alpha, 1.0, Sign::Online).unwrap(),
            optimizer: AdamWConfig::default(),
            seed: 7,
            eval_batch_size: 1,
            calibration: CalibrationSource::Reference,
            reg_context_source: RegContextSource::DatasetContexts,
        })
        .unwrap()
    };
    let mle = run(0.0);
    let vpo = run(0.5);
    // Both start from the reference policy, so the first regret is shared.
    assert_eq!(mle.records[0].instantaneous, vpo.records[0].instantaneous);
    assert_eq!(mle.records.len(), 30);
    for w in vpo.records.windows(2) {
        assert!(w[1].metric >= w[0].metric - 1e-12);
    }
}

#[test]
fn f32_online_run() {
    let setup = build_run::<f32>(&EnvSpec::contextual(2, 8, 4), 1).unwrap();
    let trace = run_online(&OnlineRunConfig {
        env: setup.env,
        reference: setup.reference,
        iterations: 10,
        batch_size: 3,
        inner_steps: 3,
        vpo: VpoConfig::new(0.1f32, 5.0, Sign::Online).unwrap(),
        optimizer: AdamWConfig::default(),
        seed: 1,
        eval_batch_size: 32,
        calibration: CalibrationSource::Reference,
        reg_context_source: RegContextSource::DatasetContexts,
    })
    .unwrap();
    assert!(trace.is_ok());
    assert!(trace.last_metric().is_finite());
}

#[test]
fn token_value_is_calibrated_jstar() {
    let mut rng = SeededRng::new(3, 9);
    let shape = TreeShape::new(3, 4, 2).unwrap();
    let mdp = TokenMdp::<f64>::random(shape, Some(2), &mut rng).unwrap();
    let (cal, _) = vpo_core::token_mdp::calibrate_token_reward(&mdp, mdp.reference()).unwrap();
    let sol = soft_backward_induction(&cal, 2.0).unwrap();
    let mean_root = (sol.root_value(0) + sol.root_value(1)) / 2.0;
    let jstar = token_jstar(&cal, 2.0, cal.reference()).unwrap();
    assert!((mean_root - jstar).abs() < 1e-10);
}
