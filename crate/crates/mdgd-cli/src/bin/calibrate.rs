// Temporary calibration harness for pinning benchmark constants.

use std::time::Instant;

use mdgd_core::data::{gen_downstream, gen_downstream_eval, gen_pretrain, gen_probe};
use mdgd_core::diagnostics::{evaluate, per_token_erank};
use mdgd_core::model::init_params;
use mdgd_core::optim::{train_loop, MdgdConfig, Method};
use mdgd_core::presets;
use mdgd_core::rng::RngState;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mode = args.first().map(|s| s.as_str()).unwrap_or("pretrain");
    let eta: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3000);
    let seed: u64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let ft_eta: f64 = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let ft_steps: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(800);

    let scene = presets::bench_scene();
    let model_cfg = presets::bench_model(seed ^ 0xA5A5);
    let data_seed = seed ^ 0x5A5A;

    let pretrain_ds = gen_pretrain(&scene, 2048, data_seed).unwrap();
    let probe = gen_probe(&scene, 256, data_seed).unwrap();
    let mut init = init_params(&model_cfg, &mut RngState::new(model_cfg.seed)).unwrap();
    // experiment: inflate weight matrices (not gains/biases) post-init
    if let Ok(f) = std::env::var("INIT_SCALE") {
        let f: f64 = f.parse().unwrap();
        let names: Vec<String> = init.set().iter().map(|p| p.name.clone()).collect();
        for n in names {
            if n.ends_with(".g") || n.ends_with(".b") || n.contains("bias") { continue; }
            if n.ends_with("proj.b") || n.ends_with("fc1.b") || n.ends_with("fc2.b") || n.contains("b_in") || n.contains("b_out") { continue; }
            let p = init.set_mut().get_mut(&n).unwrap();
            for v in p.value.data_mut() { *v *= f; }
        }
    }

    let optim = |method: Method, eta: f64, steps: usize, alpha: f64| MdgdConfig {
        eta,
        method,
        alpha,
        mask_granularity: mdgd_core::optim::MaskGranularity::Block,
        eps_proj: 1e-12,
        lv_normalization: mdgd_core::optim::LvNormalization::Mean,
        steps,
        batch_size: 8,
    };

    match mode {
        "speed" => {
            let cfg = optim(Method::Finetune, eta, 50, 1.0);
            let t0 = Instant::now();
            let _ = train_loop(&init, &pretrain_ds, &cfg, seed).unwrap();
            println!("finetune: 50 steps in {:.2?} ({:.1} ms/step)", t0.elapsed(), t0.elapsed().as_millis() as f64 / 50.0);
            let cfg = optim(Method::Mdgd, eta, 50, 1.0);
            let t0 = Instant::now();
            let _ = train_loop(&init, &pretrain_ds, &cfg, seed).unwrap();
            println!("mdgd: 50 steps in {:.2?} ({:.1} ms/step)", t0.elapsed(), t0.elapsed().as_millis() as f64 / 50.0);
        }
        "pretrain" => {
            // probe accuracy vs steps, checkpointed every 500 steps
            let mut params = init.clone();
            let chunk = 500;
            let mut done = 0;
            println!("eta {eta} steps {steps} seed {seed}");
            let t0 = Instant::now();
            while done < steps {
                let n = chunk.min(steps - done);
                let cfg = optim(Method::Finetune, eta, n, 1.0);
                let (p2, log) = train_loop(&params, &pretrain_ds, &cfg, seed + done as u64).unwrap();
                params = p2;
                done += n;
                let scores = evaluate(&params, &probe).unwrap();
                let loss = log.last().unwrap().l_vl_theta;
                println!(
                    "step {done}: loss {loss:.4} probe avg {:.4} per-attr {:?} ({:.1?})",
                    scores.mean,
                    scores.tasks.iter().map(|t| (t.accuracy * 100.0).round() / 100.0).collect::<Vec<_>>(),
                    t0.elapsed()
                );
            }
        }
        "forgetting" => {
            // full arc for one seed: pretrain → {finetune, mdgd, mdgd_gm}
            println!("seed {seed}: pretrain eta {eta} steps {steps}; ft eta {ft_eta} steps {ft_steps}");
            let t0 = Instant::now();
            let cfg = optim(Method::Finetune, eta, steps, 1.0);
            let (phi, _) = train_loop(&init, &pretrain_ds, &cfg, seed).unwrap();
            let probe_scores = evaluate(&phi, &probe).unwrap();
            let erank0 = per_token_erank(&phi, &probe, "pretrained").unwrap();
            println!(
                "pretrained: probe {:.4} erank {:.3} ({:.1?})",
                probe_scores.mean, erank0.dataset_level, t0.elapsed()
            );

            let down = gen_downstream(&scene, 512, data_seed, 0).unwrap();
            let down_eval = gen_downstream_eval(&scene, 256, data_seed, 0).unwrap();
            for (name, method, alpha) in [
                ("finetune", Method::Finetune, 1.0),
                ("mdgd", Method::Mdgd, 1.0),
                ("mdgd_gm", Method::MdgdGm, 0.1),
                ("mdgd_noalign", Method::MdgdNoalign, 1.0),
            ] {
                let t1 = Instant::now();
                let cfg = optim(method, ft_eta, ft_steps, alpha);
                let (theta, log) = train_loop(&phi, &down, &cfg, seed).unwrap();
                let probe_after = evaluate(&theta, &probe).unwrap();
                let target = evaluate(&theta, &down_eval).unwrap();
                let erank = per_token_erank(&theta, &probe, name).unwrap();
                let lv = mdgd_core::optim::visual_alignment_value(
                    &phi,
                    &theta,
                    &probe.batch_of(&(0..64).collect::<Vec<_>>()).unwrap(),
                    mdgd_core::optim::LvNormalization::Mean,
                )
                .unwrap();
                println!(
                    "{name}: probe {:.4} (drop {:.4}) target {:.4} erank {:.3} L_v {:.5} final-loss {:.4} ({:.1?})",
                    probe_after.mean,
                    probe_scores.mean - probe_after.mean,
                    target.mean,
                    erank.dataset_level,
                    lv,
                    log.last().unwrap().l_vl_theta,
                    t1.elapsed()
                );
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
