//! Central-difference check of every encoder parameter on a two-step
//! episode in double precision.
//!
//! `cargo run --release --example gradcheck -- [seed]`

use foveate::model::{check_param_gradients, Encoder, EncoderConfig, Glimpses};
use foveate::tensor::{ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map_or(Ok(0), |s| s.parse())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = EncoderConfig {
        layers: 2,
        dim: 8,
        heads: 2,
        state_size: 3,
        patch_size: 2,
        patch_count: 2,
        pos_hidden: 8,
        head_hidden: 8,
        ..EncoderConfig::default()
    };
    let mut store = ParamStore::<f64>::new();
    let enc = Encoder::new(cfg.clone(), &mut store, &mut rng)?;

    let (b, m) = (2, cfg.patch_count);
    let glimpse = |rng: &mut ChaCha8Rng| {
        let pixels: Vec<f32> = (0..b * m * cfg.patch_len()).map(|_| rng.gen()).collect();
        let coords: Vec<[f64; 3]> = (0..b * m)
            .map(|_| [rng.gen(), rng.gen(), rng.gen()])
            .collect();
        Glimpses::<f64>::from_parts(b, m, cfg.patch_len(), &pixels, &coords)
    };
    let steps = [glimpse(&mut rng)?, glimpse(&mut rng)?];
    let mut y = Tensor::zeros(&[b, cfg.classes]);
    y.data_mut()[4] = 1.0;
    y.data_mut()[cfg.classes + 7] = 1.0;

    let report = check_param_gradients(&store, 8, seed, 1e-5, |s| {
        let mut state = enc.initial_state(s, b)?;
        for g in &steps {
            let tokens = enc.tokenize(s, g)?;
            state = enc.step(s, state, tokens)?;
        }
        let logits = enc.task_head(s, state)?;
        Ok(s.graph.cross_entropy(logits, &y)?)
    })?;
    println!(
        "{} entries checked, max relative error {:.2e}",
        report.checked, report.max_rel_error
    );
    if let Some((name, i)) = report.worst {
        println!("worst: {name}[{i}]");
    }
    Ok(())
}
