use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{GraphError, Label, RatingGraph, DEFAULT_LEVELS};
use crate::seeds::derive_seed;

/// Parameters of the planted low-rank rating generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    /// Total users, inherent fakes included.
    pub users: usize,
    pub items: usize,
    /// Inherent fake users among `users`.
    pub fake: usize,
    /// Expected ratings per user.
    pub density: f64,
    /// Per-item latent mean; drawn from U(3.0, 4.2) when absent.
    pub rating_bias: Option<Vec<f64>>,
    pub levels: u8,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            users: 500,
            items: 100,
            fake: 25,
            density: 6.0,
            rating_bias: None,
            levels: DEFAULT_LEVELS,
            seed: 1,
        }
    }
}

const RANK: usize = 2;
const TASTE_SD: f64 = 1.0;
const FACTOR_SD: f64 = 0.5;
const NOISE_SD: f64 = 0.3;
const POPULARITY_SD: f64 = 0.8;
const BIAS_RANGE: std::ops::Range<f64> = 3.0..4.2;

impl SyntheticSpec {
    pub fn new(users: usize, items: usize, fake: usize, density: f64, seed: u64) -> Self {
        Self {
            users,
            items,
            fake,
            density,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: String| Err(GraphError::Validation(m));
        if self.users == 0 || self.items == 0 {
            return bad("users and items must be positive".into());
        }
        if self.fake > self.users {
            return bad(format!("{} fake users exceed {} users", self.fake, self.users));
        }
        if !(self.density >= 2.0) || !self.density.is_finite() {
            return bad(format!("density {} must be at least 2", self.density));
        }
        if self.items < 2 {
            return bad("need at least two items".into());
        }
        if self.levels < 2 {
            return bad("need at least two rating levels".into());
        }
        if let Some(b) = &self.rating_bias {
            if b.len() != self.items || b.iter().any(|v| !v.is_finite()) {
                return bad("rating_bias must hold one finite value per item".into());
            }
        }
        Ok(())
    }
}

/// Generates a rating graph with planted item bias, rank-2 user taste and
/// log-normal item popularity. Inherent fake users rate uniformly at random.
pub fn synthesize(spec: &SyntheticSpec) -> Result<RatingGraph, GraphError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth"));
    let levels = spec.levels;
    let top = f64::from(levels);
    let bias: Vec<f64> = match &spec.rating_bias {
        Some(b) => b.clone(),
        None => (0..spec.items).map(|_| rng.random_range(BIAS_RANGE)).collect(),
    };
    let factor_dist = Normal::new(0.0, FACTOR_SD).expect("valid sd");
    let taste_dist = Normal::new(0.0, TASTE_SD).expect("valid sd");
    let noise = Normal::new(0.0, NOISE_SD).expect("valid sd");
    let pop = Normal::new(0.0, POPULARITY_SD).expect("valid sd");
    let factors: Vec<[f64; RANK]> = (0..spec.items)
        .map(|_| std::array::from_fn(|_| factor_dist.sample(&mut rng)))
        .collect();
    let weights: Vec<f64> = (0..spec.items).map(|_| f64::exp(pop.sample(&mut rng))).collect();

    let mut is_fake = vec![false; spec.users];
    let mut order: Vec<usize> = (0..spec.users).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    for &u in order.iter().take(spec.fake) {
        is_fake[u] = true;
    }

    let extra = (spec.density - 2.0).max(0.0);
    let poisson = (extra > 0.0).then(|| Poisson::new(extra).expect("positive rate"));
    let width = spec.users.to_string().len().max(4);
    let item_width = spec.items.to_string().len().max(3);
    let item_ids: Vec<String> = (0..spec.items).map(|i| format!("i{i:0item_width$}")).collect();

    let mut b = RatingGraph::builder(levels);
    for (u, &fake) in is_fake.iter().enumerate() {
        let id = format!("u{u:0width$}");
        let label = if fake { Label::Fake } else { Label::Normal };
        b.user(&id, label)?;
        let extra_deg = poisson.as_ref().map_or(0, |p| p.sample(&mut rng) as usize);
        let degree = (2 + extra_deg).min(spec.items);
        let taste: [f64; RANK] = std::array::from_fn(|_| taste_dist.sample(&mut rng));
        // Weighted sampling without replacement (exponential-key method).
        let mut keys: Vec<(f64, usize)> = weights
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let r: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
                (r.ln() / w, i)
            })
            .collect();
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, item) in keys.iter().take(degree) {
            let rating = if fake {
                rng.random_range(1..=levels)
            } else {
                let affinity: f64 = taste.iter().zip(&factors[item]).map(|(a, b)| a * b).sum();
                let raw = bias[item] + affinity + noise.sample(&mut rng);
                raw.round().clamp(1.0, top) as u8
            };
            b.rating(&id, label, &item_ids[item], rating)?;
        }
    }
    for id in &item_ids {
        b.item(id)?;
    }
    Ok(b.build())
}
