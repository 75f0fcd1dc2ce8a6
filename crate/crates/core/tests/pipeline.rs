use vrpmoe::checkpoint;
use vrpmoe::env::validate;
use vrpmoe::instancegen::{generate_dataset, read_dataset, DistributionSpec};
use vrpmoe::oracle::{gap, reference};
use vrpmoe::train::{evaluate, preset, train_run, EvalOptions, RunOptions};
use vrpmoe::{DistLabel, Problem};

#[test]
fn generate_train_reload_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("grid.jsonl");
    generate_dataset(&DistributionSpec::new(DistLabel::Grid, 6), Problem::Tsp, 6, 3, &data).unwrap();
    let insts = read_dataset(&data).unwrap();

    let cfg = preset("tiny").unwrap();
    let opts = RunOptions { out_dir: dir.path().join("run"), seed: 2, workers: 1, resume: None, stop_after: None };
    let run = train_run(&cfg, &opts).unwrap();
    assert_eq!(run.metrics.len(), cfg.schedule.epochs);

    let ck = checkpoint::load(&opts.out_dir.join("last.ckpt")).unwrap();
    assert_eq!(ck.policy.params, run.policy.params);
    assert_eq!(ck.header.epoch, cfg.schedule.epochs);

    let res = evaluate(&ck.policy.net, &ck.policy.params, &insts, EvalOptions::default()).unwrap();
    for ((inst, tour), cost) in insts.iter().zip(&res.tours).zip(&res.costs) {
        validate(inst, tour).unwrap();
        assert!(gap(*cost, reference(inst).unwrap().cost) >= -1e-12);
    }
}

#[test]
fn cvrp_training_step_runs() {
    let mut cfg = preset("tiny").unwrap();
    cfg.policy.problem = Problem::Cvrp;
    cfg.schedule.epochs = 1;
    let dir = tempfile::tempdir().unwrap();
    let opts = RunOptions { out_dir: dir.path().to_path_buf(), seed: 4, workers: 2, resume: None, stop_after: None };
    let run = train_run(&cfg, &opts).unwrap();
    assert!(run.metrics[0].gaps.iter().all(|g| g.is_finite() && *g >= -1e-12));
}
