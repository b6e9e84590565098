//! Receding-horizon planning with the cross-entropy method.
//!
//! Candidate action sequences are scored by rolling particles through the
//! dynamics ensemble; the score is expected goal probability along the
//! horizon plus the terminal value estimate. Two chance constraints gate
//! feasibility: per-step constraint-violation fraction and the fraction of
//! particles whose terminal latent the safe-set classifier accepts. When no
//! candidate satisfies the safe-set constraint the acceptance threshold
//! decays and optimization restarts; below a floor the constraint is dropped
//! for that solve and the result is flagged.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::models::ModelBundle;
use crate::ndmath::{Result, Tensor};
use crate::rng::stream;

pub const INFEASIBILITY_PENALTY: f64 = -1e4;
pub const DELTA_SS_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanConfig {
    pub horizon: usize,
    pub n_particle: usize,
    pub n_candidate: usize,
    pub n_elite: usize,
    pub n_cem_iters: usize,
    /// Fraction of first-iteration candidates drawn uniformly from the action
    /// box instead of the warm-started gaussian.
    pub p_random: f64,
    /// Initial safe-set acceptance threshold; particles with
    /// `f_S(z_H) >= delta_ss` count as safe, and `1 - delta_ss_init` is the
    /// particle fraction required for feasibility (fixed even while the
    /// membership threshold decays). Resets each environment step.
    pub delta_ss_init: f64,
    /// Multiplicative decay applied when an iteration has no safe-feasible
    /// candidate.
    pub delta_ss_decay: f64,
    /// Tolerated per-step particle fraction with `f_C >= 0.5`.
    pub delta_c: f64,
    pub max_speed: f64,
    pub use_safe_set: bool,
    pub use_constraints: bool,
    /// When true, the per-step constraint test compares the mean of f_C
    /// probabilities to delta_c instead of the thresholded particle fraction.
    pub constraint_mean_test: bool,
    pub infeasibility_penalty: f64,
}

impl Default for PlanConfig {
    fn default() -> Self {
        PlanConfig {
            horizon: 5,
            n_particle: 20,
            n_candidate: 1000,
            n_elite: 100,
            n_cem_iters: 5,
            p_random: 1.0,
            delta_ss_init: 0.8,
            delta_ss_decay: 0.8,
            delta_c: 0.2,
            max_speed: 3.0,
            use_safe_set: true,
            use_constraints: true,
            constraint_mean_test: false,
            infeasibility_penalty: INFEASIBILITY_PENALTY,
        }
    }
}

/// One scored action sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePlan {
    pub actions: Vec<[f64; 2]>,
    /// Final score including any infeasibility penalty.
    pub score: f64,
    /// Mean over particles of summed goal probabilities along the horizon.
    pub goal_sum: f64,
    /// Mean over particles of the clamped terminal value.
    pub terminal_value: f64,
    /// Fraction of particles with `f_S(z_H) >= delta_ss`.
    pub safe_frac: f64,
    /// Per-step fraction of particles with `f_C >= 0.5`.
    pub violation_fracs: Vec<f64>,
    pub safe_feasible: bool,
    pub constraint_feasible: bool,
}

impl CandidatePlan {
    pub fn feasible(&self) -> bool {
        self.safe_feasible && self.constraint_feasible
    }
}

/// Diagnostics from one full CEM solve (one environment step).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub action: [f64; 2],
    pub best: CandidatePlan,
    /// delta_ss actually used by the final optimization pass.
    pub final_delta_ss: f64,
    pub n_decays: u32,
    /// True when delta_ss decayed below the floor and the safe-set
    /// constraint was dropped for this solve.
    pub fallback_unconstrained: bool,
    /// Mean elite score per CEM iteration of the final attempt.
    pub elite_means: Vec<f64>,
    /// Feasible-candidate count per CEM iteration of the final attempt.
    pub feasible_counts: Vec<usize>,
    /// Sampling distribution after the last elite refit; time-shift it to
    /// warm-start the next solve.
    pub final_dist: WarmStart,
}

/// Sampling distribution carried between environment steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStart {
    pub mean: Vec<[f64; 2]>,
    pub var: Vec<[f64; 2]>,
}

impl WarmStart {
    /// Time-shift by one step: drop the executed head, pad the tail with the
    /// uninformative box-wide distribution.
    pub fn shifted(&self, max_speed: f64) -> WarmStart {
        let h = self.mean.len();
        let tail_var = (max_speed / 2.0) * (max_speed / 2.0);
        let mut mean = self.mean[1..].to_vec();
        mean.push([0.0, 0.0]);
        let mut var = self.var[1..].to_vec();
        var.push([tail_var, tail_var]);
        debug_assert_eq!(mean.len(), h);
        WarmStart { mean, var }
    }
}

/// Scores a batch of candidate sequences at a fixed safe-set threshold.
///
/// Implementations must be order-independent: each candidate's stochastic
/// rollout is keyed by the candidate's own action bytes, never by its
/// position in the slice.
pub trait CandidateScorer {
    fn score(&self, candidates: &[Vec<[f64; 2]>], delta_ss: f64) -> Result<Vec<CandidatePlan>>;
    fn action_dim_speed(&self) -> f64;
}

/// The real scorer: TS-1 particle rollouts through the model bundle.
pub struct ModelScorer<'a> {
    pub models: &'a ModelBundle,
    pub z0: Vec<f64>,
    pub cfg: &'a PlanConfig,
    /// Seed domain for per-candidate rollout randomness.
    pub solve_seed: u64,
}

fn candidate_bytes(actions: &[[f64; 2]]) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(actions.len() * 16);
    for a in actions {
        bytes.extend_from_slice(&a[0].to_le_bytes());
        bytes.extend_from_slice(&a[1].to_le_bytes());
    }
    bytes
}

impl ModelScorer<'_> {
    /// Pre-draw one member index and noise vector per (particle, step),
    /// shared by every candidate in the solve. Common random numbers keep
    /// candidate comparisons low-variance under a high-variance dynamics
    /// model, and the draws depend only on the solve seed, so scores are
    /// independent of candidate ordering.
    fn draw_rollout_randomness(&self) -> (Vec<usize>, Vec<f64>) {
        let cfg = self.cfg;
        let d = self.models.dynamics.d;
        let b = self.models.dynamics.ensemble_size();
        let mut rng = stream(self.solve_seed, "rollout-draws", 0);
        let n = cfg.n_particle * cfg.horizon;
        let mut members = Vec::with_capacity(n);
        let mut noise = Vec::with_capacity(n * d);
        for _ in 0..n {
            members.push(rng.gen_range(0..b));
            for _ in 0..d {
                noise.push(StandardNormal.sample(&mut rng));
            }
        }
        (members, noise)
    }
}

impl CandidateScorer for ModelScorer<'_> {
    fn action_dim_speed(&self) -> f64 {
        self.cfg.max_speed
    }

    fn score(&self, candidates: &[Vec<[f64; 2]>], delta_ss: f64) -> Result<Vec<CandidatePlan>> {
        let cfg = self.cfg;
        let d = self.models.dynamics.d;
        let h = cfg.horizon;
        let np = cfg.n_particle;
        let nc = candidates.len();
        let rows = nc * np;

        let mut members = vec![0usize; rows * h];
        let mut noise = vec![0.0; rows * h * d];
        let (m, nz) = self.draw_rollout_randomness();
        // Draw order is (particle, step); scatter into the step-major batch
        // layout, sharing each (particle, step) draw across all candidates.
        for c in 0..nc {
            for p in 0..np {
                for k in 0..h {
                    let src = p * h + k;
                    let row = c * np + p;
                    members[k * rows + row] = m[src];
                    noise[(k * rows + row) * d..(k * rows + row + 1) * d]
                        .copy_from_slice(&nz[src * d..(src + 1) * d]);
                }
            }
        }

        let mut cur = Tensor::zeros(&[rows, d]);
        for r in 0..rows {
            cur.data_mut()[r * d..(r + 1) * d].copy_from_slice(&self.z0);
        }

        let mut goal_sum = vec![0.0; nc];
        let mut violation_fracs = vec![vec![0.0; h]; nc];
        for k in 0..h {
            // Constraint probabilities at z_{t+k} for k in 0..H.
            let pc = self.models.constraint.prob_batch(&cur)?;
            for c in 0..nc {
                violation_fracs[c][k] = if cfg.constraint_mean_test {
                    (0..np).map(|p| pc[c * np + p]).sum::<f64>() / np as f64
                } else {
                    (0..np).filter(|p| pc[c * np + p] >= 0.5).count() as f64 / np as f64
                };
            }
            let mut acts = Tensor::zeros(&[rows, 2]);
            for c in 0..nc {
                let a = candidates[c][k];
                for p in 0..np {
                    let r = c * np + p;
                    acts.data_mut()[r * 2] = a[0];
                    acts.data_mut()[r * 2 + 1] = a[1];
                }
            }
            let step_members = &members[k * rows..(k + 1) * rows];
            let step_noise =
                Tensor::from_vec(&[rows, d], noise[k * rows * d..(k + 1) * rows * d].to_vec())?;
            cur = self
                .models
                .dynamics
                .step_batch(&cur, &acts, step_members, &step_noise)?;
            // Goal probabilities at z_{t+k+1} for intermediate steps only;
            // the terminal state is covered by the value term.
            if k + 1 <= h - 1 {
                let pg = self.models.goal.prob_batch(&cur)?;
                for c in 0..nc {
                    for p in 0..np {
                        goal_sum[c] += pg[c * np + p] / np as f64;
                    }
                }
            }
        }

        let ps = self.models.safe_set.prob_batch(&cur)?;
        let values = self.models.value.value_batch(&cur)?;

        let mut plans = Vec::with_capacity(nc);
        for (c, cand) in candidates.iter().enumerate() {
            let safe_hits = (0..np).filter(|p| ps[c * np + p] >= delta_ss).count();
            let safe_frac = safe_hits as f64 / np as f64;
            let terminal_value =
                (0..np).map(|p| values[c * np + p]).sum::<f64>() / np as f64;
            // Particle membership uses the current (possibly decayed)
            // threshold, while the chance bound keeps the initial tolerance:
            // decaying delta_ss widens the accepted superlevel set instead of
            // tightening the required particle fraction, so each decay
            // relaxes the constraint.
            let safe_feasible =
                !cfg.use_safe_set || safe_frac >= 1.0 - cfg.delta_ss_init;
            let constraint_feasible = !cfg.use_constraints
                || violation_fracs[c].iter().all(|&f| f <= cfg.delta_c);
            let mut score = goal_sum[c] + terminal_value;
            if !(safe_feasible && constraint_feasible) {
                score += cfg.infeasibility_penalty;
            }
            plans.push(CandidatePlan {
                actions: cand.clone(),
                score,
                goal_sum: goal_sum[c],
                terminal_value,
                safe_frac,
                violation_fracs: violation_fracs[c].clone(),
                safe_feasible,
                constraint_feasible,
            });
        }
        Ok(plans)
    }
}

fn sample_uniform(h: usize, speed: f64, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    (0..h)
        .map(|_| [rng.gen_range(-speed..=speed), rng.gen_range(-speed..=speed)])
        .collect()
}

fn sample_gaussian(ws: &WarmStart, speed: f64, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    ws.mean
        .iter()
        .zip(&ws.var)
        .map(|(m, v)| {
            let mut a = [0.0; 2];
            for j in 0..2 {
                let e: f64 = StandardNormal.sample(rng);
                a[j] = (m[j] + v[j].sqrt() * e).clamp(-speed, speed);
            }
            a
        })
        .collect()
}

/// Order candidates best-first with a content tie-break so the elite set is
/// independent of sampling order.
fn sort_candidates(plans: &mut [CandidatePlan]) {
    plans.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| candidate_bytes(&a.actions).cmp(&candidate_bytes(&b.actions)))
    });
}

fn refit(elites: &[CandidatePlan], h: usize) -> WarmStart {
    let n = elites.len() as f64;
    let mut mean = vec![[0.0; 2]; h];
    let mut var = vec![[0.0; 2]; h];
    for e in elites {
        for k in 0..h {
            for j in 0..2 {
                mean[k][j] += e.actions[k][j] / n;
            }
        }
    }
    for e in elites {
        for k in 0..h {
            for j in 0..2 {
                let diff = e.actions[k][j] - mean[k][j];
                var[k][j] += diff * diff / n;
            }
        }
    }
    for v in &mut var {
        for j in 0..2 {
            v[j] = v[j].max(1e-6);
        }
    }
    WarmStart { mean, var }
}

/// Full CEM solve for one environment step.
///
/// `solve_seed` fixes all sampling randomness; the scorer keys rollout
/// randomness by candidate content, so results are reproducible and
/// independent of candidate ordering.
pub fn cem_solve<S: CandidateScorer>(
    scorer: &S,
    cfg: &PlanConfig,
    warm: Option<&WarmStart>,
    solve_seed: u64,
) -> Result<PlanResult> {
    let speed = scorer.action_dim_speed();
    let h = cfg.horizon;
    let box_warm = WarmStart {
        mean: vec![[0.0; 2]; h],
        var: vec![[(speed / 2.0) * (speed / 2.0); 2]; h],
    };

    let mut delta_ss = cfg.delta_ss_init;
    let mut n_decays = 0u32;
    let mut fallback = false;
    let mut attempt = 0u64;

    'attempts: loop {
        let mut dist = box_warm.clone();
        let mut elite_means = Vec::with_capacity(cfg.n_cem_iters);
        let mut feasible_counts = Vec::with_capacity(cfg.n_cem_iters);
        let mut final_plans: Vec<CandidatePlan> = Vec::new();

        for iter in 0..cfg.n_cem_iters {
            let mut rng = stream(solve_seed, "cem-sample", attempt * 1000 + iter as u64);
            let candidates: Vec<Vec<[f64; 2]>> = (0..cfg.n_candidate)
                .map(|_| {
                    if iter == 0 {
                        if rng.gen::<f64>() < cfg.p_random {
                            sample_uniform(h, speed, &mut rng)
                        } else {
                            sample_gaussian(warm.unwrap_or(&box_warm), speed, &mut rng)
                        }
                    } else {
                        sample_gaussian(&dist, speed, &mut rng)
                    }
                })
                .collect();

            let mut plans = scorer.score(&candidates, delta_ss)?;

            if cfg.use_safe_set && !fallback {
                let n_safe = plans.iter().filter(|p| p.feasible()).count();
                if n_safe == 0 {
                    delta_ss *= cfg.delta_ss_decay;
                    n_decays += 1;
                    if delta_ss < DELTA_SS_FLOOR {
                        fallback = true;
                    }
                    attempt += 1;
                    continue 'attempts;
                }
            }

            sort_candidates(&mut plans);
            let elites = &plans[..cfg.n_elite.min(plans.len())];
            elite_means
                .push(elites.iter().map(|p| p.score).sum::<f64>() / elites.len() as f64);
            feasible_counts.push(plans.iter().filter(|p| p.feasible()).count());
            dist = refit(elites, h);
            final_plans = plans;
        }

        let mut best = final_plans.into_iter().next().expect("no candidates");
        if fallback {
            // The safe-set constraint was dropped; report feasibility of the
            // remaining constraints honestly.
            best.safe_feasible = true;
        }
        return Ok(PlanResult {
            action: best.actions[0],
            final_delta_ss: delta_ss,
            n_decays,
            fallback_unconstrained: fallback,
            elite_means,
            feasible_counts,
            final_dist: dist,
            best,
        });
    }
}

/// Plan from a raw observation: encode (deterministic posterior mean), solve,
/// return the first action plus the time-shifted warm start for the next step.
pub fn act(
    models: &ModelBundle,
    observation: &crate::envs::Observation,
    cfg: &PlanConfig,
    warm: Option<&WarmStart>,
    solve_seed: u64,
) -> Result<([f64; 2], PlanResult, WarmStart)> {
    let mut enc_rng = stream(solve_seed, "encode-obs", 0);
    let z0 = models
        .encoder
        .encode(&observation.as_flat(), &mut enc_rng, false)?;
    let scorer = ModelScorer {
        models,
        z0: z0.z,
        cfg,
        solve_seed,
    };
    let result = cem_solve(&scorer, cfg, warm, solve_seed)?;
    let next_warm = result.final_dist.shifted(cfg.max_speed);
    Ok((result.action, result, next_warm))
}
