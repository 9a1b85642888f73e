//! Per-example clipping, Gaussian noise and the privacy ledger under basic
//! composition.

use safl::privacy::{clip_per_example, privatize_update, PrivacyLedger, PrivacyParams};
use safl::tensor::{l2_norm, RngStream};

fn main() -> safl::Result<()> {
    let g = vec![3.0, 4.0];
    println!("clip {g:?} to 1 -> {:?}", clip_per_example(&g, 1.0));
    println!("clip [0.3, 0.4] to 1 -> {:?}", clip_per_example(&[0.3, 0.4], 1.0));

    let params = PrivacyParams {
        enabled: true,
        clip_norm: 1.0,
        noise_multiplier: 1.1,
        ..PrivacyParams::default()
    };
    let mut rng = RngStream::new(0, "example:noise");
    let n = 100_000;
    let noisy = privatize_update(&vec![0.0; n], 1, &params, &mut rng)?;
    let std = (noisy.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
    println!("noise std {std:.4}, target sigma*C = {:.4}", params.noise_std());
    println!("squared noise norm over {n} coordinates {:.0}", l2_norm(&noisy).powi(2));

    let mut ledger = PrivacyLedger::new();
    for _ in 0..50 {
        ledger.account(&params)?;
    }
    println!(
        "epsilon per round {:.4}, after {} rounds {} (delta {:.1e})",
        params.epsilon_per_release(),
        ledger.rounds_elapsed(),
        ledger.epsilon_total(),
        ledger.delta_total()
    );
    let off = PrivacyParams {
        noise_multiplier: 0.0,
        ..params
    };
    println!("sigma = 0 gives epsilon {}", off.epsilon_per_release());
    Ok(())
}
