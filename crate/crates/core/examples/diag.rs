//! Scratch diagnostic: load a run checkpoint and probe each model along the
//! demonstrator path. Usage: diag <run_dir>

use lss_core::checkpoint;
use lss_core::config::load_config;
use lss_core::envs::render_raster;
use lss_core::models::ts1_rollout;
use lss_core::ndmath::Tensor;
use lss_core::orchestrator::{bundle_restore, bundle_skeleton};
use lss_core::rng::stream;

fn main() {
    let run_dir = std::path::PathBuf::from(std::env::args().nth(1).expect("run dir"));
    let mut cfg = load_config(&run_dir.join("config.toml")).expect("config");
    if let Some(h) = std::env::args().nth(3) {
        cfg.planner.horizon = h.parse().unwrap();
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run_dir.join("run_manifest.json")).unwrap()).unwrap();
    let arg_ckpt = std::env::args().nth(2);
    let last = arg_ckpt.as_deref().unwrap_or_else(|| {
        manifest["checkpoints"]
            .as_array()
            .unwrap()
            .last()
            .unwrap()
            .as_str()
            .unwrap()
    });
    println!("checkpoint: {last}");
    let map = checkpoint::load(&run_dir.join(last)).unwrap();
    let mut bundle = bundle_skeleton(&cfg);
    assert!(bundle_restore(&mut bundle, &map).is_empty());

    let mut rng = stream(0, "diag", 0);
    let mut enc = |p: [f64; 2]| {
        let obs = render_raster(p, &cfg.env);
        bundle
            .encoder
            .encode(&obs.as_flat(), &mut rng, false)
            .unwrap()
            .z
    };

    // Demo-ish path: north then east then to goal.
    let path: Vec<[f64; 2]> = vec![
        [30.0, 75.0],
        [30.0, 105.0],
        [30.0, 135.0],
        [60.0, 135.0],
        [90.0, 135.0],
        [120.0, 135.0],
        [150.0, 135.0],
        [150.0, 105.0],
        [150.0, 75.0],
    ];
    let danger: Vec<[f64; 2]> = vec![[65.0, 60.0], [90.0, 60.0], [115.0, 90.0], [90.0, 25.0]];

    println!("\n pos              f_S    f_G    f_C     V");
    for p in path.iter().chain(danger.iter()) {
        let z = enc(*p);
        let zt = Tensor::from_vec(&[1, z.len()], z.clone()).unwrap();
        println!(
            "{:>6.0},{:>4.0}  {:6.3} {:6.3} {:6.3} {:8.2}",
            p[0],
            p[1],
            bundle.safe_set.prob_batch(&zt).unwrap()[0],
            bundle.goal.prob_batch(&zt).unwrap()[0],
            bundle.constraint.prob_batch(&zt).unwrap()[0],
            bundle.value.value_batch(&zt).unwrap()[0],
        );
    }

    // Safe-set tube width: y-scan at x=90 and x-scan at y=135.
    println!("\ntube y-scan at x=90 (f_S / V):");
    for yy in (100..=150).step_by(5) {
        let z = enc([90.0, yy as f64]);
        let zt = Tensor::from_vec(&[1, z.len()], z).unwrap();
        print!(
            "  y={yy}: {:.2}/{:.0}",
            bundle.safe_set.prob_batch(&zt).unwrap()[0],
            bundle.value.value_batch(&zt).unwrap()[0]
        );
    }
    println!("\ntube x-scan at y=135 (f_S):");
    for xx in (30..=150).step_by(10) {
        let z = enc([xx as f64, 135.0]);
        let zt = Tensor::from_vec(&[1, z.len()], z).unwrap();
        print!(
            "  x={xx}: {:.2}",
            bundle.safe_set.prob_batch(&zt).unwrap()[0]
        );
    }
    println!();

    // Dynamics: one-step prediction vs actual next latent for a move east.
    let z0 = enc([30.0, 75.0]);
    let z1 = enc([33.0, 75.0]);
    let zt = Tensor::from_vec(&[1, z0.len()], z0.clone()).unwrap();
    let at = Tensor::from_vec(&[1, 2], vec![3.0, 0.0]).unwrap();
    let (mean, var) = bundle.dynamics.predict(0, &zt, &at).unwrap();
    let err: f64 = mean
        .data()
        .iter()
        .zip(&z1)
        .map(|(m, t)| (m - t).powi(2))
        .sum::<f64>()
        .sqrt();
    let latent_step: f64 = z0
        .iter()
        .zip(&z1)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let mean_var = var.data().iter().sum::<f64>() / var.len() as f64;
    println!("\nlatent |z1-z0| = {latent_step:.4} (east 3 units)");
    println!("dynamics member0: |mean - z1| = {err:.4}, mean variance = {mean_var:.5}");
    let znorm: f64 = (z0.iter().map(|v| v * v).sum::<f64>() / z0.len() as f64).sqrt();
    println!("latent rms magnitude = {znorm:.3}");

    // TS-1 terminal spread under a 5-step hold-east plan.
    let actions = [[3.0, 0.0]; 5];
    let mut roll_rng = stream(0, "diag", 1);
    let traj = ts1_rollout(&bundle.dynamics, &z0, 20, &actions, &mut roll_rng).unwrap();
    let d = z0.len();
    let h = actions.len();
    let mut term = Tensor::zeros(&[20, d]);
    for p in 0..20 {
        let off = p * (h + 1) * d + h * d;
        term.data_mut()[p * d..(p + 1) * d].copy_from_slice(&traj.data()[off..off + d]);
    }
    let fs = bundle.safe_set.prob_batch(&term).unwrap();
    let fs_min = fs.iter().cloned().fold(f64::INFINITY, f64::min);
    let fs_max = fs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let frac08 = fs.iter().filter(|&&p| p >= 0.8).count() as f64 / 20.0;
    println!("\nTS-1 from start, 5x east: terminal f_S in [{fs_min:.3}, {fs_max:.3}], frac >= 0.8 = {frac08:.2}");
    // reconstruction quality
    let obs = render_raster([30.0, 75.0], &cfg.env);
    let mse = bundle
        .encoder
        .reconstruction_mse(&Tensor::from_vec(&[1, obs.dim()], obs.as_flat()).unwrap())
        .unwrap();
    println!("recon MSE at start obs = {mse:.5}");

    // Directional probe: score straight-line candidates from the start.
    {
        use lss_core::planner::{CandidateScorer, ModelScorer};
        let z0 = enc(cfg.env.start);
        let h = cfg.planner.horizon;
        let dirs: Vec<(&str, [f64; 2])> = vec![
            ("north", [0.0, 3.0]),
            ("east", [3.0, 0.0]),
            ("south", [0.0, -3.0]),
            ("west", [-3.0, 0.0]),
            ("stay", [0.0, 0.0]),
            ("NE", [2.1, 2.1]),
        ];
        for seed_i in 0..3u64 {
            let scorer = ModelScorer {
                models: &bundle,
                z0: z0.clone(),
                cfg: &cfg.planner,
                solve_seed: 500 + seed_i,
            };
            let cands: Vec<Vec<[f64; 2]>> = dirs.iter().map(|(_, a)| vec![*a; h]).collect();
            let plans = scorer.score(&cands, cfg.planner.delta_ss_init).unwrap();
            let line: Vec<String> = dirs
                .iter()
                .zip(&plans)
                .map(|((n, _), p)| {
                    format!(
                        "{n}: s={:7.2} V={:6.2} g={:.2} sf={:.1} vmax={:.1}",
                        p.score,
                        p.terminal_value,
                        p.goal_sum,
                        p.safe_frac,
                        p.violation_fracs.iter().cloned().fold(0.0, f64::max)
                    )
                })
                .collect();
            println!("dir probe seed {seed_i}:");
            for l in line {
                println!("   {l}");
            }
        }
    }

    // Near-goal profiles along the north-east approach.
    println!("\nnear-goal scan (pos: f_G / V / f_S):");
    for p in [
        [150.0, 75.0],
        [151.0, 76.0],
        [152.0, 78.0],
        [154.0, 80.0],
        [156.0, 82.0],
        [150.0, 80.0],
        [150.0, 85.0],
        [150.0, 90.0],
    ] {
        let z = enc(p);
        let zt = Tensor::from_vec(&[1, z.len()], z).unwrap();
        println!(
            "  ({:>3.0},{:>2.0}): {:.3} / {:6.2} / {:.2}",
            p[0],
            p[1],
            bundle.goal.prob_batch(&zt).unwrap()[0],
            bundle.value.value_batch(&zt).unwrap()[0],
            bundle.safe_set.prob_batch(&zt).unwrap()[0],
        );
    }

    // Ideal-plan vs CEM-chosen comparison at several corridor states.
    {
        use lss_core::planner::{cem_solve, CandidateScorer, ModelScorer};
        let states: Vec<([f64; 2], [f64; 2])> = vec![
            ([30.0, 75.0], [0.0, 3.0]),
            ([30.0, 120.0], [1.0, 2.8]),
            ([60.0, 135.0], [3.0, 0.0]),
            ([90.0, 135.0], [3.0, 0.0]),
            ([120.0, 135.0], [3.0, 0.0]),
            ([150.0, 110.0], [0.0, -3.0]),
        ];
        println!("\nideal vs CEM (score | sf | feas):");
        for (pos, dir) in states {
            let z0 = enc(pos);
            let scorer = ModelScorer {
                models: &bundle,
                z0: z0.clone(),
                cfg: &cfg.planner,
                solve_seed: 4242,
            };
            let ideal = vec![vec![dir; cfg.planner.horizon]];
            let ip = &scorer.score(&ideal, cfg.planner.delta_ss_init).unwrap()[0];
            let res = cem_solve(&scorer, &cfg.planner, None, 4242).unwrap();
            let b = &res.best;
            println!(
                "  ({:>3.0},{:>3.0}): ideal s={:9.2} sf={:.2} feas={} | cem s={:9.2} sf={:.2} a0=({:+.2},{:+.2}) decays={}",
                pos[0], pos[1], ip.score, ip.safe_frac, ip.safe_feasible,
                b.score, b.safe_frac, b.actions[0][0], b.actions[0][1], res.n_decays
            );
        }
    }

    // Where does a full-speed 5-step east rollout actually land in latent
    // space? Compare the mean terminal latent against encodings of candidate
    // physical positions.
    {
        let z0 = enc([90.0, 135.0]);
        let mut rr = stream(0, "diag-disp", 0);
        let traj = ts1_rollout(&bundle.dynamics, &z0, 50, &[[3.0, 0.0]; 5], &mut rr).unwrap();
        let d = z0.len();
        let mut mean_term = vec![0.0; d];
        for p in 0..50 {
            let off = p * 6 * d + 5 * d;
            for j in 0..d {
                mean_term[j] += traj.data()[off + j] / 50.0;
            }
        }
        println!("\n5x east from (90,135): |mean z_H - enc(90+dx,135)| by dx:");
        for dx in [0.0, 3.0, 6.0, 9.0, 12.0, 15.0, 18.0] {
            let zt = enc([90.0 + dx, 135.0]);
            let dist: f64 = mean_term
                .iter()
                .zip(&zt)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            print!("  dx={dx:.0}: {dist:.2}");
        }
        // Also mean V over particles vs V at the mean.
        let mut term = Tensor::zeros(&[50, d]);
        for p in 0..50 {
            let off = p * 6 * d + 5 * d;
            term.data_mut()[p * d..(p + 1) * d].copy_from_slice(&traj.data()[off..off + d]);
        }
        let vs = bundle.value.value_batch(&term).unwrap();
        let mv: f64 = vs.iter().sum::<f64>() / 50.0;
        let zm = Tensor::from_vec(&[1, d], mean_term.clone()).unwrap();
        let vm = bundle.value.value_batch(&zm).unwrap()[0];
        println!(
            "\n  mean-of-V = {mv:.2}, V-of-mean = {vm:.2}, V(105,135) = {:.2}",
            bundle
                .value
                .value_batch(&Tensor::from_vec(&[1, d], enc([105.0, 135.0])).unwrap())
                .unwrap()[0]
        );
    }

    // Simulate one planned episode and print the position trace.
    use lss_core::envs::{reset, step};
    use lss_core::planner::act;
    let mut env_rng = stream(999, "diag-env", 0);
    let (mut state, mut obs) = reset(&cfg.env);
    let mut warm = None;
    for t in 0..cfg.env.horizon {
        let (action, result, next_warm) =
            act(&bundle, &obs, &cfg.planner, warm.as_ref(), 777 + t as u64).unwrap();
        if t % 5 == 0 || state.succeeded || state.violated {
            println!(
                "t={t:>3} pos=({:6.1},{:6.1}) a=({:+.2},{:+.2}) score={:8.2} safe_frac={:.2} decays={} fb={} gsum={:.3} V={:.2}",
                state.position[0], state.position[1], action[0], action[1],
                result.best.score, result.best.safe_frac, result.n_decays,
                result.fallback_unconstrained, result.best.goal_sum, result.best.terminal_value
            );
        }
        let (ns, no, _r, _v) = step(&state, action, &cfg.env, &mut env_rng).unwrap();
        state = ns;
        obs = no;
        warm = Some(next_warm);
        if state.succeeded {
            println!("reached goal at t={t}");
            break;
        }
        if state.violated {
            println!("violated at t={t}");
            break;
        }
    }
    println!(
        "final pos ({:.1},{:.1}) succeeded={} violated={}",
        state.position[0], state.position[1], state.succeeded, state.violated
    );
}
