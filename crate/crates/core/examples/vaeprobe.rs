//! Scratch probe: how much VAE training does it take for raster latents to
//! encode the agent position? Usage: vaeprobe <epochs> [d] [hidden]

use lss_core::config::RunConfig;
use lss_core::envs::render_raster;
use lss_core::latent::{train_vae_epoch, EncoderModel, LatentConfig};
use lss_core::ndmath::Tensor;
use lss_core::orchestrator::collect_offline;
use lss_core::rng::stream;

fn main() {
    let epochs: usize = std::env::args().nth(1).unwrap().parse().unwrap();
    let d: usize = std::env::args()
        .nth(2)
        .map(|s| s.parse().unwrap())
        .unwrap_or(8);
    let hidden: usize = std::env::args()
        .nth(3)
        .map(|s| s.parse().unwrap())
        .unwrap_or(64);

    let mut cfg = RunConfig::default();
    cfg.n_demo_success = 50;
    cfg.n_demo_constraint = 50;
    let dataset = collect_offline(&cfg, 0).unwrap();
    let obs_dim = cfg.env.obs_dim();
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
        let last = traj.transitions.last().unwrap();
        obs.data_mut()[row * obs_dim..(row + 1) * obs_dim]
            .copy_from_slice(&last.next_obs.as_flat());
        row += 1;
    }
    println!("{n_obs} observations of dim {obs_dim}");

    let lat_cfg = LatentConfig {
        d,
        hidden_dims: vec![hidden, hidden],
        ..LatentConfig::default()
    };
    let mut rng = stream(0, "probe-init", 0);
    let mut model = EncoderModel::new_learned(obs_dim, cfg.env.raster_size, &lat_cfg, &mut rng);
    let mut train_rng = stream(0, "probe-train", 0);

    let probe = |model: &EncoderModel| {
        // Reconstruction value at the agent's own cell for a few positions,
        // and latent separation between distant positions.
        let mut enc_rng = stream(0, "probe-enc", 0);
        let positions = [[30.0, 75.0], [90.0, 110.0], [150.0, 75.0], [30.0, 20.0]];
        let mut agent_recon = 0.0;
        let mut zs: Vec<Vec<f64>> = Vec::new();
        for p in positions {
            let o = render_raster(p, &cfg.env);
            let flat = o.as_flat();
            let agent_idx = flat
                .iter()
                .enumerate()
                .find(|(_, &v)| v == 1.0)
                .unwrap()
                .0;
            let z = model.encode(&flat, &mut enc_rng, false).unwrap().z;
            let recon = model.decode(&z).unwrap();
            agent_recon += recon[agent_idx];
            zs.push(z);
        }
        let mut min_sep = f64::INFINITY;
        for i in 0..zs.len() {
            for j in (i + 1)..zs.len() {
                let dsq: f64 = zs[i]
                    .iter()
                    .zip(&zs[j])
                    .map(|(a, b)| (a - b).powi(2))
                    .sum();
                min_sep = min_sep.min(dsq.sqrt());
            }
        }
        // Smoothness: latent distance for a 3-unit move vs a 1-cell move vs
        // a far move, from the start.
        let mut enc2 = stream(0, "probe-enc", 1);
        let mut zd = |p: [f64; 2]| {
            let o = render_raster(p, &cfg.env);
            model.encode(&o.as_flat(), &mut enc2, false).unwrap().z
        };
        let dist = |a: &[f64], b: &[f64]| {
            a.iter()
                .zip(b)
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let z_ref = zd([90.0, 135.0]);
        let d3 = dist(&z_ref, &zd([93.0, 135.0]));
        let d11 = dist(&z_ref, &zd([101.0, 135.0]));
        let d60 = dist(&z_ref, &zd([150.0, 135.0]));
        println!("    smooth: d(3u)={d3:.3} d(1cell)={d11:.3} d(far)={d60:.3}");
        (agent_recon / positions.len() as f64, min_sep)
    };

    let t0 = std::time::Instant::now();
    for e in 0..epochs {
        let (recon, kl) = train_vae_epoch(&mut model, &obs, &lat_cfg, &mut train_rng).unwrap();
        if (e + 1) % 20 == 0 || e == 0 {
            let (agent, sep) = probe(&model);
            println!(
                "epoch {:>4}: recon {:.5} kl {:.1} | agent-cell recon {:.3} min latent sep {:.3} | {:.0}s",
                e + 1,
                recon,
                kl,
                agent,
                sep,
                t0.elapsed().as_secs_f64()
            );
        }
    }
}
