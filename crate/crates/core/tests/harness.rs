//! Experiment harness runs on the shipped configs and trimmed variants.

use std::path::PathBuf;

use rtolab::harness::{self, Experiment, ExperimentConfig, ResultTable};
use rtolab::stats::median;

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(format!("{name}.json"));
    ExperimentConfig::load(&path).unwrap()
}

fn run(cfg: &ExperimentConfig) -> ResultTable {
    let table = harness::run(cfg, None).unwrap();
    assert!(table.is_ok(), "{}", table.error_report());
    table
}

fn median_of(table: &ResultTable, group: &str, metric: &str) -> f64 {
    let v: Vec<f64> = table.values(group, metric).into_iter().map(|x| x.2).collect();
    median(&v).unwrap()
}

#[test]
fn shipped_configs_validate() {
    for name in ["explore_sweep", "theory_bound", "rl_efficiency", "granularity", "data_scaling", "reward_shaping"] {
        let cfg = config(name);
        cfg.validate().unwrap();
        assert_eq!(cfg.hash().len(), 64);
    }
}

#[test]
fn dense_rewards_win_across_dataset_sizes() {
    let cfg = config("data_scaling");
    let Experiment::Rl(rl) = &cfg.experiment else { panic!("data_scaling is an rl config") };
    let table = run(&cfg);
    let mut wins = 0;
    for &n in &rl.pairs {
        let rto = median_of(&table, &format!("pairs={n};algo=rto"), "final_subopt");
        let ppo = median_of(&table, &format!("pairs={n};algo=ppo_sparse"), "final_subopt");
        if rto < ppo {
            wins += 1;
        }
    }
    assert!(wins * 5 >= rl.pairs.len() * 4, "rto ahead at {wins}/{} sizes", rl.pairs.len());
}

#[test]
fn maxmin_meets_its_bound() {
    let mut cfg = config("theory_bound");
    cfg.seeds = (0..6).collect();
    if let Experiment::TheoryBound(t) = &mut cfg.experiment {
        t.pairs = vec![64, 512];
        t.maxmin = true;
    }
    let table = run(&cfg);
    let mut checked = 0;
    for group in table.groups() {
        let held = table.values(&group, "confidence_event_held");
        let reached = table.values(&group, "maxmin_reached_star");
        let holds = table.values(&group, "thm2_holds");
        assert_eq!(holds.len(), held.len());
        for ((h, r), t) in held.iter().zip(&reached).zip(&holds) {
            if h.2 == 1.0 && r.2 == 1.0 {
                checked += 1;
                assert_eq!(t.2, 1.0, "bound failed for seed {} in {group}", t.0);
            }
        }
    }
    assert!(checked > 0);
}

#[test]
fn reward_shaping_runs_both_algorithms() {
    let mut cfg = config("reward_shaping");
    cfg.seeds = vec![0, 1];
    if let Experiment::Rl(r) = &mut cfg.experiment {
        r.instance_seeds = vec![0];
    }
    let table = run(&cfg);
    let groups = table.groups();
    assert!(groups.iter().any(|g| g.ends_with("algo=rto")));
    assert!(groups.iter().any(|g| g.ends_with("algo=rs_ppo")));
    for g in &groups {
        assert!(table.values(g, "final_return_true").iter().all(|v| v.2.is_finite()));
    }
}

#[test]
fn written_outputs_match_in_memory_tables() {
    let mut cfg = config("explore_sweep");
    if let Experiment::ExploreSweep(e) = &mut cfg.experiment {
        e.trees = 3;
    }
    let table = run(&cfg);
    let dir = std::env::temp_dir().join(format!("rtolab-harness-{}", std::process::id()));
    table.write(&dir, &cfg, "test").unwrap();
    assert_eq!(std::fs::read_to_string(dir.join("results.csv")).unwrap(), table.rows_csv().unwrap());
    assert_eq!(std::fs::read_to_string(dir.join("summary.csv")).unwrap(), table.summary_csv().unwrap());
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(meta["config_hash"], cfg.hash());
    std::fs::remove_dir_all(&dir).unwrap();
}
