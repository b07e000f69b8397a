//! Random hyperparameter search space.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use dropens::training::{Hyperparams, DEFAULT_PATIENCE};

/// How hidden layer widths are chosen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HiddenLaw {
    Fixed(Vec<usize>),
    /// Each of `n_layers` widths uniform on the integers `[lo, hi]`.
    Uniform { n_layers: usize, lo: usize, hi: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    /// Log-uniform bounds.
    pub lr0: (f64, f64),
    pub lr_decay: (f64, f64),
    pub momentum0: (f64, f64),
    /// Upper bound for `momentum_final`; the lower bound is the sampled
    /// `momentum0`.
    pub momentum_final_max: f64,
    pub saturation_epoch: (usize, usize),
    pub batch_sizes: Vec<usize>,
    /// Log-uniform bounds.
    pub init_range: (f64, f64),
    pub hidden: HiddenLaw,
    /// Log-uniform bounds on each layer's cap, or `None` for no caps.
    pub max_norm: Option<(f64, f64)>,
    /// Probability that a configuration has no caps at all.
    pub p_no_norm: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
}

impl SearchSpace {
    fn base(hidden: HiddenLaw, max_epochs: usize) -> Self {
        Self {
            lr0: (1e-3, 1.0),
            lr_decay: (0.95, 1.0),
            momentum0: (0.0, 0.9),
            momentum_final_max: 0.99,
            saturation_epoch: (10, 200),
            batch_sizes: vec![16, 32, 64, 128, 256],
            init_range: (1e-3, 1e-1),
            hidden,
            max_norm: Some((0.5, 8.0)),
            p_no_norm: 0.5,
            max_epochs,
            patience_epochs: DEFAULT_PATIENCE.min(max_epochs),
        }
    }

    /// Two hidden layers of ten units each.
    ///
    /// Initial ranges are drawn from `[0.1, 1]` here. With two inputs and
    /// ten units per layer, weights of at most 0.1 leave the network so
    /// close to the all-zero saddle that almost no configuration moves off
    /// chance level before early stopping ends the run.
    pub fn small_nets(max_epochs: usize) -> Self {
        Self {
            init_range: (0.1, 1.0),
            ..Self::base(HiddenLaw::Fixed(vec![10, 10]), max_epochs)
        }
    }

    /// Two hidden layers with widths drawn from `[100, min(1600, cap)]`.
    pub fn wide_nets(max_hidden: usize, max_epochs: usize) -> Self {
        let hi = max_hidden.clamp(100, 1600);
        Self::base(
            HiddenLaw::Uniform {
                n_layers: 2,
                lo: 100,
                hi,
            },
            max_epochs,
        )
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Hyperparams {
        let log_uniform = |rng: &mut R, (lo, hi): (f64, f64)| -> f64 {
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi)
            }
        };
        let lr0 = log_uniform(rng, self.lr0);
        let lr_decay = rng.gen_range(self.lr_decay.0..=self.lr_decay.1);
        let momentum0 = rng.gen_range(self.momentum0.0..=self.momentum0.1);
        let momentum_final = rng.gen_range(momentum0..=self.momentum_final_max);
        let momentum_saturation_epoch = rng.gen_range(self.saturation_epoch.0..=self.saturation_epoch.1);
        let batch_size = *self.batch_sizes.choose(rng).expect("batch size list is nonempty");
        let init_range = log_uniform(rng, self.init_range);
        let hidden_sizes = match &self.hidden {
            HiddenLaw::Fixed(sizes) => sizes.clone(),
            HiddenLaw::Uniform { n_layers, lo, hi } => {
                (0..*n_layers).map(|_| rng.gen_range(*lo..=*hi)).collect()
            }
        };
        // Always draw the coin so the stream position does not depend on
        // whether caps are enabled.
        let skip_norms = rng.gen::<f64>() < self.p_no_norm;
        let max_norms = match self.max_norm {
            Some(bounds) if !skip_norms => Some(
                (0..=hidden_sizes.len())
                    .map(|_| log_uniform(rng, bounds))
                    .collect(),
            ),
            _ => None,
        };
        Hyperparams {
            lr0,
            lr_decay,
            momentum0,
            momentum_final,
            momentum_saturation_epoch,
            batch_size,
            max_epochs: self.max_epochs,
            patience_epochs: self.patience_epochs,
            init_range,
            hidden_sizes,
            max_norms,
        }
    }
}
