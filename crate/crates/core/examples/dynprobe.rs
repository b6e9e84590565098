//! Scratch probe: keep training the dynamics ensemble from a run checkpoint
//! and watch NLL / predicted variance. Usage: dynprobe <run_dir> <extra_steps>

use lss_core::checkpoint;
use lss_core::config::load_config;
use lss_core::ndmath::Tensor;
use lss_core::orchestrator::{bundle_restore, bundle_skeleton, encode_trajectory, Dataset};
use lss_core::rng::stream;
use rand::Rng;

fn main() {
    let run_dir = std::path::PathBuf::from(std::env::args().nth(1).expect("run dir"));
    let steps: usize = std::env::args().nth(2).unwrap().parse().unwrap();
    let cfg = load_config(&run_dir.join("config.toml")).expect("config");
    let map = checkpoint::load(&run_dir.join("checkpoints/round_00")).unwrap();
    let mut bundle = bundle_skeleton(&cfg);
    assert!(bundle_restore(&mut bundle, &map).is_empty());
    let dataset: Dataset =
        serde_json::from_slice(&std::fs::read(run_dir.join("dataset.json")).unwrap()).unwrap();

    let d = cfg.latent.d;
    let mut zs = Vec::new();
    let mut acts = Vec::new();
    let mut zns = Vec::new();
    for traj in dataset
        .trajectories
        .iter()
        .filter(|t| t.id < 100)
    {
        let enc = encode_trajectory(&bundle.encoder, traj).unwrap();
        for t in 0..enc.actions.len() {
            zs.push(enc.z.row(t).to_vec());
            acts.push(enc.actions[t]);
            zns.push(enc.z.row(t + 1).to_vec());
        }
    }
    let n = zs.len();
    println!("{n} transitions");
    let flat = |rows: &[Vec<f64>], w: usize| {
        Tensor::from_vec(&[rows.len(), w], rows.concat()).unwrap()
    };
    let zt = flat(&zs, d);
    let at = Tensor::from_vec(&[n, 2], acts.iter().flatten().cloned().collect()).unwrap();
    let znt = flat(&zns, d);

    // Optional: fresh ensemble with a different hidden width.
    let mut rng = stream(1, "dynprobe", 0);
    if let Some(w) = std::env::args().nth(3) {
        let w: usize = w.parse().unwrap();
        let mcfg = lss_core::models::ModelConfig {
            dyn_hidden: vec![w, w],
            ..cfg.models.clone()
        };
        bundle.dynamics = lss_core::models::DynamicsEnsemble::new(d, 2, &mcfg, &mut rng);
        println!("fresh dynamics, hidden {w}x{w}");
    }
    let batch = cfg.train.batch_size;
    let probe_idx: Vec<usize> = (0..512).map(|_| rng.gen_range(0..n)).collect();
    let take = |t: &Tensor, idx: &[usize], w: usize| {
        let mut out = Tensor::zeros(&[idx.len(), w]);
        for (i, &r) in idx.iter().enumerate() {
            out.data_mut()[i * w..(i + 1) * w].copy_from_slice(t.row(r));
        }
        out
    };
    let pz = take(&zt, &probe_idx, d);
    let pa = take(&at, &probe_idx, 2);
    let pzn = take(&znt, &probe_idx, d);

    let eval = |dynm: &lss_core::models::DynamicsEnsemble| {
        let (mean, var) = dynm.predict(0, &pz, &pa).unwrap();
        let mut sq = 0.0;
        for i in 0..mean.len() {
            let dlt = mean.data()[i] - pzn.data()[i];
            sq += dlt * dlt;
        }
        let mse = sq / mean.len() as f64;
        let mv = var.data().iter().sum::<f64>() / var.len() as f64;
        (mse, mv)
    };

    let (mse0, mv0) = eval(&bundle.dynamics);
    println!("checkpoint: residual mse/dim {mse0:.5}, mean var/dim {mv0:.5}");
    for s in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let bz = take(&zt, &idx, d);
        let ba = take(&at, &idx, 2);
        let bzn = take(&znt, &idx, d);
        bundle
            .dynamics
            .train_step(&bz, &ba, &bzn, cfg.models.dyn_lr, &mut rng)
            .unwrap();
        if (s + 1) % 1000 == 0 {
            let (mse, mv) = eval(&bundle.dynamics);
            println!("step {:>6}: residual mse/dim {mse:.5}, mean var/dim {mv:.5}", s + 1);
        }
    }
}
