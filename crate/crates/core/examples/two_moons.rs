//! Trains on Two Moons and writes the predictive entropy over `[-10, 10]²` as CSV.
//!
//! ```text
//! cargo run --release -p fsvi --example two_moons -- [epochs] [out.csv]
//! ```

use std::path::PathBuf;

use fsvi::context::{ContextConfig, ContextSource, Interval};
use fsvi::data::two_moons;
use fsvi::linearization::LinearizationMode;
use fsvi::network::{Activation, MlpSpec};
use fsvi::objective::{Likelihood, PriorSpec};
use fsvi::predictive::{posterior_predictive, write_atomic};
use fsvi::seeded_rng;
use fsvi::training::{train, TrainConfig};
use ndarray::Array2;

fn main() -> fsvi::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().map(|a| a.parse().expect("epochs")).unwrap_or(1000);
    let out = PathBuf::from(args.next().unwrap_or_else(|| "two_moons_entropy.csv".into()));

    let data = two_moons(200, 0.1, &mut seeded_rng(0))?;
    let spec = MlpSpec::with_activation(vec![2, 30, 30, 2], Activation::Tanh)?;
    let context = ContextConfig {
        source: ContextSource::UniformBox { bounds: vec![Interval { lo: -10.0, hi: 10.0 }; 2] },
        sets: 1,
        points: 20,
        minibatch_mix: 0.0,
    };
    let lik = Likelihood::CategoricalSoftmax;
    let mut cfg = TrainConfig::new(context, lik, PriorSpec::isotropic(0.1)?);
    cfg.epochs = epochs;
    cfg.batch_size = 100;
    cfg.learning_rate = 1e-2;
    cfg.linearization_mode = LinearizationMode::Exact;
    let outcome = train(&spec, &data, None, &cfg)?;

    let steps = 81;
    let at = |k: usize| -10.0 + 20.0 * k as f64 / (steps - 1) as f64;
    let grid = Array2::from_shape_fn(
        (steps * steps, 2),
        |(i, j)| if j == 0 { at(i / steps) } else { at(i % steps) },
    );
    let pred = posterior_predictive(&outcome.posterior, &spec, grid.view(), &lik, 200, &mut seeded_rng(1))?;
    let entropy = pred.entropy();

    let mut csv = String::from("x0,x1,entropy\n");
    for (row, h) in grid.rows().into_iter().zip(entropy.iter()) {
        csv.push_str(&format!("{},{},{h}\n", row[0], row[1]));
    }
    write_atomic(&out, csv.as_bytes())?;
    let last = outcome.history.steps.last();
    eprintln!(
        "wrote {} ({} points); final elbo {:.3}, fkl {:.3}",
        out.display(),
        grid.nrows(),
        last.map_or(f64::NAN, |r| r.elbo),
        last.map_or(f64::NAN, |r| r.fkl)
    );
    Ok(())
}
