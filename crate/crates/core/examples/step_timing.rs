//! Times forward/backward passes of the default desk-scale model.

use std::time::Instant;

use dadu::loss::{deep_supervision_loss, SupervisionWeights};
use dadu::network::{DaduModel, ModelConfig};
use dadu::{Mode, Shape4, Tape, Tensor4};
use rand::SeedableRng;

fn main() -> dadu::Result<()> {
    let batch: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let mut model = DaduModel::<f32>::new(ModelConfig::default(), 0)?;
    println!("parameters: {}", model.parameters().numel());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let x = Tensor4::uniform(Shape4::new(batch, 1, 64, 64)?, 0.0, 1.0, &mut rng);
    let t = Tensor4::uniform(Shape4::new(batch, 4, 64, 64)?, 0.0, 1.0, &mut rng);
    let w = SupervisionWeights::uniform(3, 0.25)?;
    for _ in 0..3 {
        let start = Instant::now();
        let mut tape = Tape::new();
        let (out, bound) = model.forward(&mut tape, &x, Mode::Train)?;
        let target = tape.constant(t.clone());
        let main = tape.dice_loss(out.main, target, 1.0)?;
        let aux = out
            .aux
            .iter()
            .map(|&a| tape.dice_loss(a, target, 1.0))
            .collect::<dadu::Result<Vec<_>>>()?;
        let loss = deep_supervision_loss(&mut tape, main, &aux, &w)?;
        let fwd = start.elapsed();
        tape.backward(loss)?;
        model.parameters_mut().accumulate(&tape, &bound)?;
        println!(
            "nodes {} forward {:.3}s total {:.3}s",
            tape.len(),
            fwd.as_secs_f64(),
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
