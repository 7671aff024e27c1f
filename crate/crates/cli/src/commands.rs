use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use rtolab::dpo::{dpo_fit, DpoConfig};
use rtolab::explorer::{build_tree, explore_sentence, explore_token, figure_tree_policy, planted_tree_policy};
use rtolab::harness::{self, load_json, Experiment, ExperimentConfig, ResultTable, TheoryBound};
use rtolab::optimizers::{self, PpoConfig, RtoCoefficients, TrainSetup};
use rtolab::planner::soft_backward_induction;
use rtolab::policy::PolicyFile;
use rtolab::preference::{sample_dataset, PreferenceDataset};
use rtolab::reward_model::{
    covariance, mle_fit, plug_in_reward, CovarianceFile, LinearRewardFile, MleConfig, MleFit, PessimismConfig,
};
use rtolab::{AutoregressivePolicy, FeatureSpec, FeatureTable, MdpConfig, RewardTable, TokenMdp};

use crate::{CompareArgs, DpoArgs, ExploreArgs, MleArgs, PlanArgs, RunArgs, SampleArgs, TheoryArgs, TrainArgs};

/// What `mle` writes and `train --reward` reads.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MleOutput {
    reward: LinearRewardFile,
    covariance: CovarianceFile,
    pessimism: PessimismConfig,
    fit: MleFit,
}

fn load_mdp(path: &Path) -> Result<TokenMdp> {
    let cfg: MdpConfig = load_json(path)?;
    Ok(cfg.build_token_mdp()?)
}

fn load_policy(path: Option<&Path>, mdp: &TokenMdp) -> Result<AutoregressivePolicy> {
    let Some(path) = path else {
        return Ok(AutoregressivePolicy::uniform(mdp.shape()));
    };
    let file: PolicyFile = load_json(path)?;
    let pi = AutoregressivePolicy::from_file(&file).with_context(|| format!("policy {}", path.display()))?;
    if pi.shape() != mdp.shape() {
        bail!("policy {} does not match the MDP's shape", path.display());
    }
    Ok(pi)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn plan(a: PlanArgs) -> Result<ExitCode> {
    let mdp = load_mdp(&a.mdp)?;
    let reference = load_policy(a.reference.as_deref(), &mdp)?;
    let (tables, pi) = soft_backward_induction(&mdp, mdp.reward(), &reference, a.beta)?;
    write_json(&a.out, &pi.to_file())?;
    if let Some(path) = &a.values {
        write_text(path, &tables.to_csv(&mdp))?;
    }
    println!("V*(ρ) = {}", tables.initial_value(&mdp));
    Ok(ExitCode::SUCCESS)
}

pub fn sample(a: SampleArgs) -> Result<ExitCode> {
    let mdp = load_mdp(&a.mdp)?;
    let sampler = load_policy(a.sampler.as_deref(), &mdp)?;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let data = sample_dataset(&mdp, mdp.reward(), &sampler, a.pairs, &mut rng)?;
    data.save(&a.out)?;
    println!("wrote {} pairs to {}", data.len(), a.out.display());
    Ok(ExitCode::SUCCESS)
}

fn features_for(mdp_path: &Path, explicit: Option<&Path>, mdp: &TokenMdp) -> Result<FeatureTable> {
    let spec: FeatureSpec = match explicit {
        Some(p) => load_json(p)?,
        None => {
            let cfg: MdpConfig = load_json(mdp_path)?;
            match cfg.reward {
                Some(rtolab::mdp::RewardConfig::Linear { features, .. }) => features,
                _ => bail!("the MDP reward is not linear; pass --features"),
            }
        }
    };
    Ok(FeatureTable::build(&spec, mdp.shape())?)
}

pub fn mle(a: MleArgs) -> Result<ExitCode> {
    let mdp = load_mdp(&a.mdp)?;
    let data = PreferenceDataset::load(&a.dataset).with_context(|| format!("dataset {}", a.dataset.display()))?;
    data.validate(mdp.shape())?;
    let features = features_for(&a.mdp, a.features.as_deref(), &mdp)?;
    let fit = mle_fit(&data, &features, a.b_bound, &MleConfig::default())?;
    let sigma = covariance(&data, &features, a.lambda)?;
    let pessimism = PessimismConfig::derive(
        a.delta,
        a.pessimism_c,
        mdp.shape().horizon(),
        features.max_norm(),
        a.b_bound,
        features.dim(),
        a.lambda,
    )?;
    if !fit.converged {
        log::warn!("MLE stopped before reaching its tolerance (gradient {:e})", fit.grad_norm);
    }
    let out = MleOutput {
        reward: LinearRewardFile {
            features: features.spec().clone(),
            theta: fit.theta.clone(),
            l_bound: features.max_norm(),
            b_bound: a.b_bound,
        },
        covariance: sigma.to_file(),
        pessimism,
        fit,
    };
    write_json(&a.out, &out)?;
    println!("log-likelihood {} ϱ {}", out.fit.loglik, pessimism.rho);
    Ok(ExitCode::SUCCESS)
}

pub fn dpo(a: DpoArgs) -> Result<ExitCode> {
    let mdp = load_mdp(&a.mdp)?;
    let reference = load_policy(a.reference.as_deref(), &mdp)?;
    let data = PreferenceDataset::load(&a.dataset).with_context(|| format!("dataset {}", a.dataset.display()))?;
    data.validate(mdp.shape())?;
    let cfg = DpoConfig { beta: a.beta, lr: a.lr, max_iters: a.max_iters, ..DpoConfig::default() };
    let fit = dpo_fit(&data, &reference, None, &cfg)?;
    if !fit.converged {
        log::warn!("DPO stopped after {} iterations (gradient {:e})", fit.iterations, fit.grad_norm);
    }
    write_json(&a.out, &fit.policy.to_file())?;
    println!("loss {} after {} iterations", fit.loss, fit.iterations);
    Ok(ExitCode::SUCCESS)
}

fn learned_reward(path: &Path, mdp: &TokenMdp) -> Result<RewardTable> {
    let out: MleOutput = load_json(path)?;
    let features = FeatureTable::build(&out.reward.features, mdp.shape())?;
    if features.dim() != out.reward.theta.len() {
        bail!("reward {}: θ has the wrong dimension", path.display());
    }
    Ok(plug_in_reward(&features, &out.reward.theta))
}

pub fn train(a: TrainArgs) -> Result<ExitCode> {
    let mdp = load_mdp(&a.mdp)?;
    let reference = load_policy(a.reference.as_deref(), &mdp)?;
    let r_mle = match &a.reward {
        Some(p) => learned_reward(p, &mdp)?,
        None => mdp.reward().clone(),
    };
    let dpo = a.dpo_policy.as_deref().map(|p| load_policy(Some(p), &mdp)).transpose()?;
    let ppo: PpoConfig = match &a.ppo {
        Some(p) => load_json(p)?,
        None => PpoConfig::default(),
    };
    let setup = TrainSetup {
        mdp: &mdp,
        reference: &reference,
        r_mle: &r_mle,
        dpo: dpo.as_ref(),
        coeffs: RtoCoefficients { beta1: a.beta1, beta2: a.beta2, beta3: a.beta3 },
        delimiters: &a.delimiters,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let (pi, log) = optimizers::train(&setup, a.algo, &reference, &ppo, a.iters, &mut rng)?;
    write_text(&a.out, &log.to_csv())?;
    if let Some(p) = &a.policy_out {
        write_json(p, &pi.to_file())?;
    }
    if let Some(last) = log.records.last() {
        println!("final suboptimality {} after {} episodes", last.subopt_exact, last.episodes);
    }
    Ok(ExitCode::SUCCESS)
}

pub fn explore(a: ExploreArgs) -> Result<ExitCode> {
    let mut csv = String::from("tree_id,method,queries,found_optimal\n");
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let trees = if a.example { 1 } else { a.trees };
    for id in 0..trees {
        let (pi, xi) = if a.example {
            (figure_tree_policy(), 1.0)
        } else {
            (planted_tree_policy(a.vocab, a.horizon, a.xi, &mut rng)?, a.xi)
        };
        let tree = build_tree(&pi, 0, xi)?;
        let best = tree.sentence_reward(tree.best_leaf());
        for (method, run) in [("token", explore_token(&tree)), ("sentence", explore_sentence(&tree))] {
            let found = tree.sentence_reward(run.leaf) == best;
            let _ = writeln!(csv, "{id},{method},{},{found}", run.queries);
        }
    }
    write_text(&a.out, &csv)?;
    Ok(ExitCode::SUCCESS)
}

fn git_revision() -> String {
    std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

fn execute(cfg: &ExperimentConfig) -> Result<ResultTable> {
    Ok(harness::run(cfg, harness::workers_from_env()?)?)
}

fn report_errors(table: &ResultTable) -> ExitCode {
    if table.is_ok() {
        ExitCode::SUCCESS
    } else {
        eprint!("{}", table.error_report());
        eprintln!("{} seed(s) failed", table.errors.len());
        ExitCode::from(1)
    }
}

pub fn theory_bound(a: TheoryArgs) -> Result<ExitCode> {
    let params: TheoryBound = load_json(&a.instance)?;
    let cfg = ExperimentConfig {
        name: "theory_bound".into(),
        seeds: (0..a.seeds).collect(),
        output_dir: None,
        experiment: Experiment::TheoryBound(params),
    };
    cfg.validate()?;
    let table = execute(&cfg)?;
    let mut csv = String::from("seed,pairs,subopt,thm1_rhs,thm2_rhs,confidence_event_held\n");
    let mut keys: Vec<(u64, usize)> = table
        .rows
        .iter()
        .filter_map(|r| r.group.strip_prefix("pairs=").and_then(|n| n.parse().ok()).map(|n| (r.seed, n)))
        .collect();
    keys.sort_unstable();
    keys.dedup();
    for (seed, n) in keys {
        let group = format!("pairs={n}");
        let get = |m: &str| {
            table.rows.iter().find(|r| r.seed == seed && r.group == group && r.metric == m).map_or(f64::NAN, |r| r.value)
        };
        let held = get("confidence_event_held") == 1.0;
        let _ = writeln!(csv, "{seed},{n},{},{},{},{held}", get("subopt"), get("thm1_rhs"), get("thm2_rhs"));
    }
    write_text(&a.out, &csv)?;
    Ok(report_errors(&table))
}

fn output_dir(cfg: &ExperimentConfig, flag: Option<PathBuf>) -> PathBuf {
    flag.or_else(|| cfg.output_dir.clone()).unwrap_or_else(|| PathBuf::from("runs").join(&cfg.name))
}

pub fn run(a: RunArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&a.config)?;
    let table = execute(&cfg)?;
    let dir = output_dir(&cfg, a.out);
    table.write(&dir, &cfg, &git_revision())?;
    println!("wrote {} rows to {}", table.rows.len(), dir.display());
    Ok(report_errors(&table))
}

pub fn ablate(a: RunArgs) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(&a.config)?;
    if !matches!(cfg.experiment, Experiment::Rl(_)) {
        return Err(rtolab::Error::Config("experiment: ablate expects an `rl` experiment".into()).into());
    }
    let table = execute(&cfg)?;
    let dir = output_dir(&cfg, a.out);
    table.write(&dir, &cfg, &git_revision())?;
    println!("{:<32} {:>14} {:>14} {:>14} {:>12}", "group", "return_true", "return_rmle", "subopt", "episodes");
    let summary = table.summary();
    for group in table.groups() {
        let med = |m: &str| {
            summary.iter().find(|s| s.group == group && s.metric == m).map_or(f64::NAN, |s| s.median)
        };
        println!(
            "{:<32} {:>14.6} {:>14.6} {:>14.6} {:>12}",
            group,
            med("final_return_true"),
            med("final_return_rmle"),
            med("final_subopt"),
            med("episodes_to_threshold")
        );
    }
    Ok(report_errors(&table))
}

pub fn compare(a: CompareArgs) -> Result<ExitCode> {
    let ca = harness::load_curves(&a.a, a.group_a.as_deref(), &a.metric)?;
    let cb = harness::load_curves(&a.b, a.group_b.as_deref(), &a.metric)?;
    let summary = harness::compare(&ca, &cb, &a.metric)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(ExitCode::SUCCESS)
}

pub fn validate(path: &Path) -> Result<ExitCode> {
    let cfg = ExperimentConfig::load(path)?;
    println!("ok {} {} {}", cfg.name, cfg.experiment.kind(), cfg.hash());
    Ok(ExitCode::SUCCESS)
}
