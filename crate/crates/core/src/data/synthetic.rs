use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Source, Split};

/// The two-dimensional diamond task.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiamondSpec {
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl DiamondSpec {
    /// 100 training, 500 validation and 1000 test points.
    pub fn new(seed: u64) -> Self {
        Self {
            n_train: 100,
            n_valid: 500,
            n_test: 1000,
            seed,
        }
    }
}

/// 1 inside the open diamond `|x1| + |x2| < 1`, 0 in the corner triangles
/// (boundary included).
pub fn diamond_label(x1: f64, x2: f64) -> usize {
    usize::from(x1.abs() + x2.abs() < 1.0)
}

fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let x: f64 = rng.gen_range(-1.0..1.0);
        if x > -1.0 {
            return x;
        }
    }
}

/// Points uniform on `(-1, 1)^2`, drawn from one stream: training points
/// first, then validation, then test.
pub fn synthetic_diamond(spec: &DiamondSpec) -> Split {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut next_origin = 0;
    let mut draw = |n: usize| {
        let mut features = Vec::with_capacity(2 * n);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let (x1, x2) = (open_unit(&mut rng), open_unit(&mut rng));
            features.extend([x1, x2]);
            labels.push(diamond_label(x1, x2));
        }
        let origin = (next_origin..next_origin + n).collect();
        next_origin += n;
        Dataset::new("synthetic", 2, 2, Source::Synthetic, features, labels, origin)
            .expect("diamond points are well formed")
    };
    let train = draw(spec.n_train);
    let valid = draw(spec.n_valid);
    let test = draw(spec.n_test);
    Split { train, valid, test }
}
