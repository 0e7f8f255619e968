//! One synthetic training run.
//! `cargo run --release --example synthetic_run -- SEED` with optional env
//! `EPOCHS`, `NTRAIN`, `ETA`, `ATTENTION`, `LR`.

use dadu::data;
use dadu::network::ModelConfig;
use dadu::train::{TrainConfig, Trainer};

fn env<T: std::str::FromStr>(k: &str, d: T) -> T {
    std::env::var(k).ok().and_then(|v| v.parse().ok()).unwrap_or(d)
}

fn main() -> dadu::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let epochs = env("EPOCHS", 20);
    let train = data::phantom_set(env("NTRAIN", 200), 64, seed * 2 + 1, 0.05)?;
    let val = data::phantom_set(50, 64, seed * 2 + 2, 0.05)?;
    let model = ModelConfig { attention: env("ATTENTION", 1) == 1, ..ModelConfig::default() };
    let cfg = TrainConfig { epochs, seed, eta: env("ETA", 0.25), lr: env("LR", 1e-3), ..TrainConfig::default() };
    let mut t = Trainer::new(model, cfg)?;
    for _ in 0..epochs {
        let r = t.epoch(&train, &val)?.clone();
        let hd: Vec<String> = r.hd.iter().map(|h| h.map_or("-".into(), |v| format!("{v:.2}"))).collect();
        let dsc: Vec<String> = r.dsc.iter().map(|d| format!("{d:.3}")).collect();
        println!("epoch {:2} loss {:.4} dsc {:.4} [{}] hd [{}] {:.1}s", r.epoch, r.loss, r.mean_dsc(), dsc.join(" "), hd.join(" "), r.seconds);
    }
    Ok(())
}
