//! End-to-end driver: offline data collection, offline model fitting,
//! online rounds of planned rollouts with dataset growth and safe-set
//! relabeling, and evaluation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::TensorMap;
use crate::config::RunConfig;
use crate::envs::{
    collect_trajectory, demo_policy, random_policy, ConstraintDemoPolicy, EnvConfig, Transition,
};
use crate::latent::{train_vae_epoch, EncoderModel};
use crate::metrics::{MetricsRecord, PlannerStats};
use crate::models::{
    classifier_train_step, value_offline_targets, BinaryClassifier, DynamicsEnsemble, ModelBundle,
    SafeSetClassifier, ValueEnsemble,
};
use crate::ndmath::{NdError, ParamBlock, Tensor};
use crate::planner::{act, WarmStart};
use crate::rng::{derive_seed, stream};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("demo success rate too low: {succeeded}/{attempted} attempts succeeded")]
    DemoCollectionFailed { succeeded: usize, attempted: usize },
    #[error("dataset has no {0} trajectories")]
    EmptyView(&'static str),
    #[error(transparent)]
    Numeric(#[from] NdError),
}

type Result<T> = std::result::Result<T, OrchestratorError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajSource {
    DemoSuccess,
    DemoConstraint,
    Random,
    Online,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub source: TrajSource,
    pub transitions: Vec<Transition>,
    pub success: bool,
    pub violation: bool,
}

/// The growing dataset D with its labeled views.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub trajectories: Vec<Trajectory>,
    next_id: u64,
}

impl Dataset {
    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    pub fn push(&mut self, source: TrajSource, transitions: Vec<Transition>, success: bool) {
        let violation = transitions.iter().any(|t| t.constraint_violation);
        self.trajectories.push(Trajectory {
            id: self.next_id,
            source,
            transitions,
            success,
            violation,
        });
        self.next_id += 1;
    }

    /// Trajectories that reached the goal (the sampled safe set).
    pub fn success_view(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.success)
    }

    /// Trajectories containing a constraint violation.
    pub fn constraint_view(&self) -> impl Iterator<Item = &Trajectory> {
        self.trajectories.iter().filter(|t| t.violation)
    }

    pub fn n_transitions(&self) -> usize {
        self.trajectories.iter().map(|t| t.transitions.len()).sum()
    }
}

fn env_raster_size(env: &EnvConfig) -> usize {
    match env.obs_mode {
        crate::envs::ObsMode::Raster => env.raster_size,
        crate::envs::ObsMode::StateVector => 0,
    }
}

/// Collect the offline dataset: successful demos (re-rolled under noise up
/// to the retry cap), constraint demos, and optional random data.
pub fn collect_offline(cfg: &RunConfig, seed: u64) -> Result<Dataset> {
    let env = &cfg.env;
    let mut dataset = Dataset::default();
    let mut attempted = 0;
    let mut succeeded = 0;
    'demos: for i in 0..cfg.n_demo_success {
        for attempt in 0..cfg.demo_retry_cap.max(1) {
            attempted += 1;
            let mut rng = stream(seed, "offline-demo", (i * cfg.demo_retry_cap + attempt) as u64);
            let id = dataset.next_id();
            let (transitions, success) = collect_trajectory(
                |state, _obs, _rng| demo_policy(state, env),
                None,
                env,
                id,
                &mut rng,
            );
            if success {
                succeeded += 1;
                dataset.push(TrajSource::DemoSuccess, transitions, success);
                continue 'demos;
            }
        }
        // This demonstration failed every retry; keep going and judge the
        // overall rate below.
        if succeeded * 2 < attempted {
            return Err(OrchestratorError::DemoCollectionFailed {
                succeeded,
                attempted,
            });
        }
    }
    if succeeded < cfg.n_demo_success {
        return Err(OrchestratorError::DemoCollectionFailed {
            succeeded,
            attempted,
        });
    }
    for i in 0..cfg.n_demo_constraint {
        let mut rng = stream(seed, "offline-constraint", i as u64);
        let policy = ConstraintDemoPolicy::sample(env, &mut rng);
        let id = dataset.next_id();
        let (transitions, success) = collect_trajectory(
            |state, _obs, _rng| policy.action(state, env),
            Some(policy.start),
            env,
            id,
            &mut rng,
        );
        dataset.push(TrajSource::DemoConstraint, transitions, success);
    }
    for i in 0..cfg.n_rand {
        let mut rng = stream(seed, "offline-random", i as u64);
        let id = dataset.next_id();
        let (transitions, success) =
            collect_trajectory(|_s, _o, r| random_policy(env, r), None, env, id, &mut rng);
        dataset.push(TrajSource::Random, transitions, success);
    }
    Ok(dataset)
}

/// One trajectory pushed through the frozen encoder: `z` holds the T+1
/// visited latents row by row.
#[derive(Debug, Clone)]
pub struct EncodedTrajectory {
    pub z: Tensor,
    pub actions: Vec<[f64; 2]>,
    pub rewards: Vec<f64>,
    /// Arrival state of transition t is in the goal set.
    pub in_goal: Vec<bool>,
    /// Arrival state of transition t is post-violation.
    pub violating: Vec<bool>,
    pub success: bool,
    pub violation: bool,
    pub source: TrajSource,
}

pub fn encode_trajectory(
    encoder: &EncoderModel,
    traj: &Trajectory,
) -> std::result::Result<EncodedTrajectory, NdError> {
    let t_len = traj.transitions.len();
    let obs_dim = traj.transitions[0].obs.dim();
    let mut obs = Tensor::zeros(&[t_len + 1, obs_dim]);
    for (i, tr) in traj.transitions.iter().enumerate() {
        obs.data_mut()[i * obs_dim..(i + 1) * obs_dim].copy_from_slice(&tr.obs.as_flat());
    }
    obs.data_mut()[t_len * obs_dim..]
        .copy_from_slice(&traj.transitions[t_len - 1].next_obs.as_flat());
    // Deterministic (posterior mean) encoding: training pools and planning
    // see the same latent for the same observation.
    let mut rng = stream(0, "encode-fixed", 0);
    let z = encoder.encode_batch(&obs, &mut rng, false)?;
    Ok(EncodedTrajectory {
        z,
        actions: traj.transitions.iter().map(|t| t.action).collect(),
        rewards: traj.transitions.iter().map(|t| t.reward).collect(),
        in_goal: traj.transitions.iter().map(|t| t.in_goal).collect(),
        violating: traj
            .transitions
            .iter()
            .map(|t| t.constraint_violation)
            .collect(),
        success: traj.success,
        violation: traj.violation,
        source: traj.source,
    })
}

fn encode_all(
    encoder: &EncoderModel,
    dataset: &Dataset,
) -> std::result::Result<Vec<EncodedTrajectory>, NdError> {
    dataset
        .trajectories
        .iter()
        .map(|t| encode_trajectory(encoder, t))
        .collect()
}

/// Flat training pools rebuilt from the encoded dataset before each phase.
struct Pools {
    /// All consecutive transitions: (z, a, z').
    dyn_z: Tensor,
    dyn_a: Tensor,
    dyn_zn: Tensor,
    /// Value data (demo-success + online trajectories only).
    val_z: Tensor,
    val_mc: Tensor,
    val_r: Vec<f64>,
    val_zn: Tensor,
    /// Classifier pools over all visited states.
    goal_pos: Tensor,
    goal_neg: Tensor,
    constraint_pos: Option<Tensor>,
    constraint_neg: Tensor,
    /// Safe-set triples: state, successor (terminal states are their own
    /// successor), sampled-safe-set indicator.
    ss_z: Tensor,
    ss_zn: Tensor,
    ss_ind: Vec<f64>,
}

fn rows_to_tensor(rows: &[Vec<f64>], d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[rows.len(), d]);
    for (i, r) in rows.iter().enumerate() {
        t.data_mut()[i * d..(i + 1) * d].copy_from_slice(r);
    }
    t
}

fn build_pools(encoded: &[EncodedTrajectory], cfg: &RunConfig) -> Result<Pools> {
    let d = cfg.latent.d;
    let gamma = cfg.models.gamma;
    let mut dyn_z = Vec::new();
    let mut dyn_a = Vec::new();
    let mut dyn_zn = Vec::new();
    let mut val_z = Vec::new();
    let mut val_mc = Vec::new();
    let mut val_r = Vec::new();
    let mut val_zn = Vec::new();
    let mut goal_pos = Vec::new();
    let mut goal_neg = Vec::new();
    let mut con_pos = Vec::new();
    let mut con_neg = Vec::new();
    let mut ss_z = Vec::new();
    let mut ss_zn = Vec::new();
    let mut ss_ind = Vec::new();

    for traj in encoded {
        let t_len = traj.actions.len();
        let z = |i: usize| traj.z.row(i).to_vec();
        // Monte Carlo targets indexed by state: prepend a dummy reward so
        // target[t] = gamma * (r_t + target[t+1]) aligns with z_t.
        let mut shifted = Vec::with_capacity(t_len + 1);
        shifted.push(0.0);
        shifted.extend_from_slice(&traj.rewards);
        let mc = value_offline_targets(&shifted, gamma);
        let value_source =
            matches!(traj.source, TrajSource::DemoSuccess | TrajSource::Online);
        for t in 0..t_len {
            dyn_z.push(z(t));
            dyn_a.push(traj.actions[t].to_vec());
            dyn_zn.push(z(t + 1));
            if value_source {
                val_z.push(z(t));
                val_mc.push(vec![mc[t]]);
                val_r.push(traj.rewards[t]);
                val_zn.push(z(t + 1));
            }
        }
        for t in 0..=t_len {
            let state = z(t);
            let in_goal = t > 0 && traj.in_goal[t - 1];
            let violating = t > 0 && traj.violating[t - 1];
            if in_goal {
                goal_pos.push(state.clone());
            } else {
                goal_neg.push(state.clone());
            }
            if violating {
                con_pos.push(state.clone());
            } else {
                con_neg.push(state.clone());
            }
            let successor = if t < t_len { z(t + 1) } else { state.clone() };
            ss_z.push(state);
            ss_zn.push(successor);
            ss_ind.push(if traj.success { 1.0 } else { 0.0 });
        }
    }
    if goal_pos.is_empty() {
        return Err(OrchestratorError::EmptyView("goal-reaching"));
    }
    Ok(Pools {
        dyn_z: rows_to_tensor(&dyn_z, d),
        dyn_a: rows_to_tensor(&dyn_a, 2),
        dyn_zn: rows_to_tensor(&dyn_zn, d),
        val_z: rows_to_tensor(&val_z, d),
        val_mc: rows_to_tensor(&val_mc, 1),
        val_r,
        val_zn: rows_to_tensor(&val_zn, d),
        goal_pos: rows_to_tensor(&goal_pos, d),
        goal_neg: rows_to_tensor(&goal_neg, d),
        constraint_pos: if con_pos.is_empty() {
            None
        } else {
            Some(rows_to_tensor(&con_pos, d))
        },
        constraint_neg: rows_to_tensor(&con_neg, d),
        ss_z: rows_to_tensor(&ss_z, d),
        ss_zn: rows_to_tensor(&ss_zn, d),
        ss_ind,
    })
}

fn sample_rows(pool: &Tensor, idx: &[usize]) -> Tensor {
    let d = pool.cols();
    let mut out = Tensor::zeros(&[idx.len(), d]);
    for (r, &i) in idx.iter().enumerate() {
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(pool.row(i));
    }
    out
}

fn train_dynamics(
    dynamics: &mut DynamicsEnsemble,
    pools: &Pools,
    steps: usize,
    lr: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = pools.dyn_z.rows();
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch.min(n)).map(|_| rng.gen_range(0..n)).collect();
        dynamics.train_step(
            &sample_rows(&pools.dyn_z, &idx),
            &sample_rows(&pools.dyn_a, &idx),
            &sample_rows(&pools.dyn_zn, &idx),
            lr,
            rng,
        )?;
    }
    Ok(())
}

fn train_value(
    value: &mut ValueEnsemble,
    pools: &Pools,
    steps: usize,
    lr: f64,
    batch: usize,
    use_td: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = pools.val_z.rows();
    if n == 0 {
        return Err(OrchestratorError::EmptyView("value-training"));
    }
    for _ in 0..steps {
        let idx: Vec<usize> = (0..batch.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let z = sample_rows(&pools.val_z, &idx);
        if use_td {
            let rewards: Vec<f64> = idx.iter().map(|&i| pools.val_r[i]).collect();
            let zn = sample_rows(&pools.val_zn, &idx);
            value.td_step(&z, &rewards, &zn, lr)?;
        } else {
            let targets = sample_rows(&pools.val_mc, &idx);
            value.offline_train_step(&z, &targets, lr)?;
        }
    }
    Ok(())
}

fn train_classifiers(
    bundle: &mut ModelBundle,
    pools: &Pools,
    steps: usize,
    cfg: &RunConfig,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let lr = cfg.models.classifier_lr;
    for _ in 0..steps {
        classifier_train_step(
            &mut bundle.goal,
            &pools.goal_pos,
            &pools.goal_neg,
            &cfg.models,
            lr,
            rng,
        )?;
        if let Some(con_pos) = &pools.constraint_pos {
            classifier_train_step(
                &mut bundle.constraint,
                con_pos,
                &pools.constraint_neg,
                &cfg.models,
                lr,
                rng,
            )?;
        }
    }
    Ok(())
}

/// Safe-set training by fixed-point iteration: recursive labels are
/// recomputed from the current classifier every `refit_interval` steps.
fn train_safe_set(
    safe_set: &mut SafeSetClassifier,
    pools: &Pools,
    steps: usize,
    refit_interval: usize,
    lr: f64,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    let n = pools.ss_z.rows();
    let mut labels = safe_set.targets(&pools.ss_zn, &pools.ss_ind)?;
    for step in 0..steps {
        if step > 0 && step % refit_interval.max(1) == 0 {
            labels = safe_set.targets(&pools.ss_zn, &pools.ss_ind)?;
        }
        let idx: Vec<usize> = (0..batch.min(n)).map(|_| rng.gen_range(0..n)).collect();
        let z = sample_rows(&pools.ss_z, &idx);
        let y = Tensor::from_vec(&[idx.len(), 1], idx.iter().map(|&i| labels[i]).collect())
            .map_err(OrchestratorError::Numeric)?;
        safe_set.train_step(&z, &y, lr)?;
    }
    Ok(())
}

/// Offline phase: train the VAE on all observations, encode the dataset,
/// then fit dynamics, value (Monte Carlo targets), goal/constraint
/// classifiers, and the recursive safe set.
pub fn train_offline(
    dataset: &Dataset,
    cfg: &RunConfig,
    seed: u64,
) -> Result<(ModelBundle, Vec<EncodedTrajectory>)> {
    if dataset.success_view().next().is_none() {
        return Err(OrchestratorError::EmptyView("successful"));
    }
    if dataset.constraint_view().next().is_none() {
        return Err(OrchestratorError::EmptyView("constraint-violating"));
    }
    let obs_dim = cfg.env.obs_dim();
    let mut init_rng = stream(seed, "model-init", 0);
    let mut encoder =
        EncoderModel::new_learned(obs_dim, env_raster_size(&cfg.env), &cfg.latent, &mut init_rng);

    // Every visited observation, all trajectories.
    let n_obs: usize = dataset
        .trajectories
        .iter()
        .map(|t| t.transitions.len() + 1)
        .sum();
    let mut obs = Tensor::zeros(&[n_obs, obs_dim]);
    let mut row = 0;
    for traj in &dataset.trajectories {
        for tr in &traj.transitions {
            obs.data_mut()[row * obs_dim..(row + 1) * obs_dim]
                .copy_from_slice(&tr.obs.as_flat());
            row += 1;
        }
        let last = traj.transitions.last().expect("non-empty trajectory");
        obs.data_mut()[row * obs_dim..(row + 1) * obs_dim]
            .copy_from_slice(&last.next_obs.as_flat());
        row += 1;
    }
    let mut vae_rng = stream(seed, "vae-train", 0);
    for _ in 0..cfg.latent.epochs {
        train_vae_epoch(&mut encoder, &obs, &cfg.latent, &mut vae_rng)?;
    }

    let encoded = encode_all(&encoder, dataset)?;
    let pools = build_pools(&encoded, cfg)?;

    let mut bundle = ModelBundle {
        dynamics: DynamicsEnsemble::new(cfg.latent.d, 2, &cfg.models, &mut init_rng),
        value: ValueEnsemble::new(cfg.latent.d, &cfg.models, &mut init_rng),
        goal: BinaryClassifier::new(cfg.latent.d, &cfg.models.classifier_hidden, &mut init_rng),
        constraint: BinaryClassifier::new(
            cfg.latent.d,
            &cfg.models.classifier_hidden,
            &mut init_rng,
        ),
        safe_set: SafeSetClassifier::new(cfg.latent.d, &cfg.models, &mut init_rng),
        encoder,
    };

    let steps = cfg.train.offline_steps;
    let batch = cfg.train.batch_size;
    let mut rng = stream(seed, "offline-train", 0);
    train_dynamics(
        &mut bundle.dynamics,
        &pools,
        steps,
        cfg.models.dyn_lr,
        batch,
        &mut rng,
    )?;
    train_value(
        &mut bundle.value,
        &pools,
        steps,
        cfg.models.value_lr,
        batch,
        false,
        &mut rng,
    )?;
    // Online TD bootstraps from the target network; hand it the offline fit
    // rather than the initialization.
    bundle.value.sync_targets();
    train_classifiers(&mut bundle, &pools, steps, cfg, &mut rng)?;
    train_safe_set(
        &mut bundle.safe_set,
        &pools,
        steps,
        cfg.train.ss_refit_interval,
        cfg.models.classifier_lr,
        batch,
        &mut rng,
    )?;
    Ok((bundle, encoded))
}

fn steps_to_goal(transitions: &[Transition], horizon: usize) -> usize {
    transitions
        .iter()
        .position(|t| t.in_goal)
        .map(|i| i + 1)
        .unwrap_or(horizon)
}

/// Run one planned rollout; planning is skipped on frozen steps.
fn planned_rollout(
    bundle: &ModelBundle,
    env: &EnvConfig,
    plan_cfg: &crate::planner::PlanConfig,
    trajectory_id: u64,
    seed: u64,
    purpose: &str,
) -> (Vec<Transition>, bool, PlannerStats) {
    let mut warm: Option<WarmStart> = None;
    let mut stats = PlannerStats::default();
    let mut env_rng = stream(seed, purpose, trajectory_id);
    let (transitions, success) = collect_trajectory(
        |state, obs, _rng| {
            let solve_seed = derive_seed(seed, "plan", trajectory_id * 10_000 + state.t as u64);
            match act(bundle, obs, plan_cfg, warm.as_ref(), solve_seed) {
                Ok((action, result, next_warm)) => {
                    stats.planned_steps += 1;
                    stats.mean_score += result.best.score;
                    stats.mean_safe_frac += result.best.safe_frac;
                    stats.total_decays += u64::from(result.n_decays);
                    stats.fallback_steps += u64::from(result.fallback_unconstrained);
                    warm = Some(next_warm);
                    action
                }
                Err(_) => [0.0, 0.0],
            }
        },
        None,
        env,
        trajectory_id,
        &mut env_rng,
    );
    if stats.planned_steps > 0 {
        stats.mean_score /= stats.planned_steps as f64;
        stats.mean_safe_frac /= stats.planned_steps as f64;
    }
    (transitions, success, stats)
}

fn record_for(
    phase: &str,
    round: usize,
    seed: u64,
    traj: &Trajectory,
    horizon: usize,
    stats: PlannerStats,
) -> MetricsRecord {
    MetricsRecord {
        phase: phase.to_string(),
        round,
        trajectory_id: traj.id,
        seed,
        total_reward: traj.transitions.iter().map(|t| t.reward).sum(),
        success: traj.success,
        violation: traj.violation,
        steps_to_goal: steps_to_goal(&traj.transitions, horizon),
        planner: stats,
    }
}

/// One online round: K planned rollouts appended to the dataset (successes
/// grow the safe set at the next refit), then every model except the frozen
/// encoder is updated.
pub fn run_round(
    bundle: &mut ModelBundle,
    dataset: &mut Dataset,
    encoded: &mut Vec<EncodedTrajectory>,
    cfg: &RunConfig,
    round: usize,
    seed: u64,
) -> Result<Vec<MetricsRecord>> {
    let mut records = Vec::with_capacity(cfg.rollouts_per_round);
    for _ in 0..cfg.rollouts_per_round {
        let id = dataset.next_id();
        let (transitions, success, stats) =
            planned_rollout(bundle, &cfg.env, &cfg.planner, id, seed, "online-env");
        dataset.push(TrajSource::Online, transitions, success);
        let traj = dataset.trajectories.last().expect("just pushed");
        encoded.push(encode_trajectory(&bundle.encoder, traj)?);
        records.push(record_for(
            "online",
            round,
            seed,
            traj,
            cfg.env.horizon,
            stats,
        ));
    }

    let pools = build_pools(encoded, cfg)?;
    let mut rng = stream(seed, "round-train", round as u64);
    let batch = cfg.train.batch_size;
    train_dynamics(
        &mut bundle.dynamics,
        &pools,
        cfg.train.round_dyn_steps,
        cfg.models.dyn_lr,
        batch,
        &mut rng,
    )?;
    train_value(
        &mut bundle.value,
        &pools,
        cfg.train.round_value_steps,
        cfg.models.value_lr,
        batch,
        true,
        &mut rng,
    )?;
    train_classifiers(bundle, &pools, cfg.train.round_classifier_steps, cfg, &mut rng)?;
    train_safe_set(
        &mut bundle.safe_set,
        &pools,
        cfg.train.round_classifier_steps,
        cfg.train.ss_refit_interval,
        cfg.models.classifier_lr,
        batch,
        &mut rng,
    )?;
    Ok(records)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub n_episodes: usize,
    pub success_rate: f64,
    pub violation_rate: f64,
    pub mean_reward: f64,
    pub reward_stderr: f64,
}

/// Greedy evaluation: planned rollouts with no dataset growth or training.
pub fn evaluate(
    bundle: &ModelBundle,
    cfg: &RunConfig,
    n_episodes: usize,
    seed: u64,
    round: usize,
) -> (EvalSummary, Vec<MetricsRecord>) {
    let mut records = Vec::with_capacity(n_episodes);
    for ep in 0..n_episodes {
        let id = ep as u64;
        let (transitions, success, stats) =
            planned_rollout(bundle, &cfg.env, &cfg.planner, id, seed, "eval-env");
        let violation = transitions.iter().any(|t| t.constraint_violation);
        let traj = Trajectory {
            id,
            source: TrajSource::Online,
            transitions,
            success,
            violation,
        };
        records.push(record_for("eval", round, seed, &traj, cfg.env.horizon, stats));
    }
    let n = records.len() as f64;
    let mean_reward = records.iter().map(|r| r.total_reward).sum::<f64>() / n;
    let var = records
        .iter()
        .map(|r| (r.total_reward - mean_reward).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    let summary = EvalSummary {
        n_episodes,
        success_rate: records.iter().filter(|r| r.success).count() as f64 / n,
        violation_rate: records.iter().filter(|r| r.violation).count() as f64 / n,
        mean_reward,
        reward_stderr: (var / n).sqrt(),
    };
    (summary, records)
}

fn block_entries(prefix: &str, block: &ParamBlock, map: &mut TensorMap) {
    for (name, tensor) in block.named_params() {
        map.insert(format!("{prefix}.{name}"), tensor.clone());
    }
    for (i, layer) in block.layers.iter().enumerate() {
        map.insert(
            format!("{prefix}.layer{i}.weight.steps"),
            Tensor::from_vec(&[1], vec![layer.weight_adam.step_count as f64]).unwrap(),
        );
        map.insert(
            format!("{prefix}.layer{i}.bias.steps"),
            Tensor::from_vec(&[1], vec![layer.bias_adam.step_count as f64]).unwrap(),
        );
    }
}

fn block_restore(prefix: &str, block: &mut ParamBlock, map: &TensorMap) -> Vec<String> {
    let mut missing = Vec::new();
    for (name, tensor) in block.named_params_mut() {
        let full = format!("{prefix}.{name}");
        match map.get(&full) {
            Some(t) => *tensor = t.clone(),
            None => missing.push(full),
        }
    }
    for (i, layer) in block.layers.iter_mut().enumerate() {
        for (suffix, state) in [
            ("weight", &mut layer.weight_adam),
            ("bias", &mut layer.bias_adam),
        ] {
            let full = format!("{prefix}.layer{i}.{suffix}.steps");
            match map.get(&full) {
                Some(t) => state.step_count = t.data()[0] as u64,
                None => missing.push(full),
            }
        }
    }
    missing
}

/// Flatten every parameter of the bundle into named tensors for checkpointing.
pub fn bundle_to_map(bundle: &ModelBundle) -> TensorMap {
    let mut map = TensorMap::new();
    block_entries("encoder.enc", &bundle.encoder.enc_params, &mut map);
    block_entries("encoder.dec", &bundle.encoder.dec_params, &mut map);
    for (i, m) in bundle.dynamics.members.iter().enumerate() {
        block_entries(&format!("dynamics.m{i}"), m, &mut map);
    }
    for (i, m) in bundle.value.members.iter().enumerate() {
        block_entries(&format!("value.m{i}"), m, &mut map);
    }
    for (i, m) in bundle.value.target_members.iter().enumerate() {
        block_entries(&format!("value.target{i}"), m, &mut map);
    }
    map.insert(
        "value.updates_since_sync",
        Tensor::from_vec(&[1], vec![bundle.value.updates_since_sync as f64]).unwrap(),
    );
    block_entries("goal", &bundle.goal.params, &mut map);
    block_entries("constraint", &bundle.constraint.params, &mut map);
    block_entries("safe_set", &bundle.safe_set.net.params, &mut map);
    map
}

/// Restore parameters into a freshly constructed bundle. Returns the list of
/// missing parameter names (empty on success).
pub fn bundle_restore(bundle: &mut ModelBundle, map: &TensorMap) -> Vec<String> {
    let mut missing = Vec::new();
    missing.extend(block_restore("encoder.enc", &mut bundle.encoder.enc_params, map));
    missing.extend(block_restore("encoder.dec", &mut bundle.encoder.dec_params, map));
    for (i, m) in bundle.dynamics.members.iter_mut().enumerate() {
        missing.extend(block_restore(&format!("dynamics.m{i}"), m, map));
    }
    for (i, m) in bundle.value.members.iter_mut().enumerate() {
        missing.extend(block_restore(&format!("value.m{i}"), m, map));
    }
    for (i, m) in bundle.value.target_members.iter_mut().enumerate() {
        missing.extend(block_restore(&format!("value.target{i}"), m, map));
    }
    match map.get("value.updates_since_sync") {
        Some(t) => bundle.value.updates_since_sync = t.data()[0] as u64,
        None => missing.push("value.updates_since_sync".into()),
    }
    missing.extend(block_restore("goal", &mut bundle.goal.params, map));
    missing.extend(block_restore("constraint", &mut bundle.constraint.params, map));
    missing.extend(block_restore("safe_set", &mut bundle.safe_set.net.params, map));
    missing
}

/// Construct an untrained bundle with the right shapes for `bundle_restore`.
pub fn bundle_skeleton(cfg: &RunConfig) -> ModelBundle {
    let mut rng = stream(0, "skeleton", 0);
    ModelBundle {
        encoder: EncoderModel::new_learned(
            cfg.env.obs_dim(),
            env_raster_size(&cfg.env),
            &cfg.latent,
            &mut rng,
        ),
        dynamics: DynamicsEnsemble::new(cfg.latent.d, 2, &cfg.models, &mut rng),
        value: ValueEnsemble::new(cfg.latent.d, &cfg.models, &mut rng),
        goal: BinaryClassifier::new(cfg.latent.d, &cfg.models.classifier_hidden, &mut rng),
        constraint: BinaryClassifier::new(cfg.latent.d, &cfg.models.classifier_hidden, &mut rng),
        safe_set: SafeSetClassifier::new(cfg.latent.d, &cfg.models, &mut rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::ObsMode;

    fn tiny_cfg() -> RunConfig {
        RunConfig {
            env: EnvConfig {
                obs_mode: ObsMode::StateVector,
                horizon: 30,
                noise_sigma: 0.0,
                ..EnvConfig::default()
            },
            latent: crate::latent::LatentConfig {
                d: 2,
                hidden_dims: vec![16],
                epochs: 2,
                ..crate::latent::LatentConfig::default()
            },
            models: crate::models::ModelConfig {
                dyn_hidden: vec![16],
                dyn_ensemble: 2,
                value_hidden: vec![16],
                classifier_hidden: vec![16],
                batch_size: 32,
                ..crate::models::ModelConfig::default()
            },
            planner: crate::planner::PlanConfig {
                n_candidate: 20,
                n_elite: 4,
                n_cem_iters: 2,
                n_particle: 2,
                horizon: 3,
                ..crate::planner::PlanConfig::default()
            },
            train: crate::config::TrainConfig {
                offline_steps: 30,
                round_dyn_steps: 5,
                round_classifier_steps: 5,
                round_value_steps: 5,
                batch_size: 32,
                ..crate::config::TrainConfig::default()
            },
            n_demo_success: 3,
            n_demo_constraint: 3,
            n_rand: 0,
            n_rounds: 1,
            rollouts_per_round: 2,
            eval_episodes: 2,
            demo_retry_cap: 5,
        }
    }

    #[test]
    fn offline_collection_counts_and_views() {
        // Demos need the full 100-step horizon to reach the goal.
        let mut cfg = tiny_cfg();
        cfg.env.horizon = 100;
        let dataset = collect_offline(&cfg, 0).unwrap();
        assert_eq!(dataset.trajectories.len(), 6);
        assert_eq!(dataset.success_view().count(), 3);
        assert!(dataset.constraint_view().count() >= 2);
        for traj in &dataset.trajectories {
            assert_eq!(traj.transitions.len(), 100);
        }
        assert_eq!(dataset.n_transitions(), 600);
    }

    #[test]
    fn success_and_constraint_views_are_disjoint() {
        let mut cfg = tiny_cfg();
        cfg.env.horizon = 100;
        let dataset = collect_offline(&cfg, 1).unwrap();
        for traj in &dataset.trajectories {
            assert!(!(traj.success && traj.violation));
        }
    }

    #[test]
    fn mc_targets_align_with_states() {
        // A 3-step trajectory with rewards [-1, -1, 0]: the target for the
        // first state is gamma*(-1) + gamma^2*(-1) + gamma^3*0.
        let gamma = 0.99;
        let mut shifted = vec![0.0, -1.0, -1.0, 0.0];
        let mc = value_offline_targets(&shifted, gamma);
        assert!((mc[0] - (gamma * -1.0 + gamma * gamma * -1.0)).abs() < 1e-12);
        // Last state target is 0 (no observed future).
        assert_eq!(mc[3], 0.0);
        shifted[3] = -1.0;
        let mc = value_offline_targets(&shifted, gamma);
        assert!((mc[2] - (gamma * -1.0)).abs() < 1e-12);
    }

    #[test]
    fn offline_training_orders_classifiers_correctly() {
        let mut cfg = tiny_cfg();
        cfg.env.horizon = 100;
        cfg.train.offline_steps = 800;
        cfg.models.classifier_lr = 1e-3;
        cfg.latent.epochs = 0; // untrained encoder is still a fixed deterministic map
        let dataset = collect_offline(&cfg, 2).unwrap();
        let (bundle, encoded) = train_offline(&dataset, &cfg, 2).unwrap();

        // Mean f_S over demonstrator states vs constraint-demo states.
        let mut demo_mean = (0.0, 0);
        let mut con_mean = (0.0, 0);
        for traj in &encoded {
            let probs = bundle.safe_set.prob_batch(&traj.z).unwrap();
            let acc = match traj.source {
                TrajSource::DemoSuccess => &mut demo_mean,
                TrajSource::DemoConstraint => &mut con_mean,
                _ => continue,
            };
            acc.0 += probs.iter().sum::<f64>();
            acc.1 += probs.len();
        }
        let demo = demo_mean.0 / demo_mean.1 as f64;
        let con = con_mean.0 / con_mean.1 as f64;
        assert!(
            demo > con,
            "safe set should rank demo states above constraint demos: {demo} vs {con}"
        );

        // f_G at a goal-region state vs the start state.
        let mut enc_rng = stream(0, "t", 0);
        let goal_z = bundle
            .encoder
            .encode(&cfg.env.goal_center, &mut enc_rng, false)
            .unwrap();
        let start_z = bundle
            .encoder
            .encode(&cfg.env.start, &mut enc_rng, false)
            .unwrap();
        let g_goal = bundle.goal.prob(&goal_z.z).unwrap();
        let g_start = bundle.goal.prob(&start_z.z).unwrap();
        assert!(g_goal > g_start, "goal classifier: {g_goal} vs {g_start}");

        // Value at the start state is within the clamped range.
        let z = Tensor::from_vec(&[1, 2], start_z.z.clone()).unwrap();
        let v = bundle.value.value_batch(&z).unwrap()[0];
        assert!((-1.0 / (1.0 - cfg.models.gamma)..=0.0).contains(&v));
    }

    #[test]
    fn round_grows_dataset_by_k_trajectories() {
        let mut cfg = tiny_cfg();
        cfg.env.horizon = 100;
        let dataset = collect_offline(&cfg, 3).unwrap();
        let before_trajs = dataset.trajectories.len();
        let before_transitions = dataset.n_transitions();
        let (mut bundle, mut encoded) = train_offline(&dataset, &cfg, 3).unwrap();
        let mut dataset = dataset;
        let records =
            run_round(&mut bundle, &mut dataset, &mut encoded, &cfg, 1, 3).unwrap();
        assert_eq!(records.len(), cfg.rollouts_per_round);
        assert_eq!(
            dataset.trajectories.len(),
            before_trajs + cfg.rollouts_per_round
        );
        assert_eq!(
            dataset.n_transitions(),
            before_transitions + cfg.rollouts_per_round * cfg.env.horizon
        );
        for r in &records {
            assert_eq!(r.phase, "online");
            assert!((r.total_reward > -(cfg.env.horizon as f64)) == r.success);
        }
    }

    #[test]
    fn evaluation_rates_are_means_of_records() {
        let mut cfg = tiny_cfg();
        cfg.env.horizon = 100;
        let dataset = collect_offline(&cfg, 4).unwrap();
        let (bundle, _) = train_offline(&dataset, &cfg, 4).unwrap();
        let (summary, records) = evaluate(&bundle, &cfg, 3, 4, 0);
        assert_eq!(records.len(), 3);
        let succ = records.iter().filter(|r| r.success).count() as f64 / 3.0;
        assert_eq!(summary.success_rate, succ);
        assert!((0.0..=1.0).contains(&summary.violation_rate));
        assert!(summary.mean_reward <= 0.0 && summary.mean_reward >= -(cfg.env.horizon as f64));
        for r in &records {
            assert!(!(r.success && r.violation));
        }
    }

    #[test]
    fn bundle_checkpoint_round_trip() {
        let cfg = tiny_cfg();
        let mut rng = stream(5, "t", 0);
        let bundle = ModelBundle {
            encoder: EncoderModel::new_learned(
                cfg.env.obs_dim(),
                env_raster_size(&cfg.env),
                &cfg.latent,
                &mut rng,
            ),
            dynamics: DynamicsEnsemble::new(cfg.latent.d, 2, &cfg.models, &mut rng),
            value: ValueEnsemble::new(cfg.latent.d, &cfg.models, &mut rng),
            goal: BinaryClassifier::new(cfg.latent.d, &cfg.models.classifier_hidden, &mut rng),
            constraint: BinaryClassifier::new(
                cfg.latent.d,
                &cfg.models.classifier_hidden,
                &mut rng,
            ),
            safe_set: SafeSetClassifier::new(cfg.latent.d, &cfg.models, &mut rng),
        };
        let map = bundle_to_map(&bundle);
        let mut restored = bundle_skeleton(&cfg);
        let missing = bundle_restore(&mut restored, &map);
        assert!(missing.is_empty(), "missing: {missing:?}");
        assert_eq!(restored, bundle);
    }
}
