//! Strategy codebook: nearest-code assignment and exponential-moving-average updates.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Codes plus the EMA accumulators that drive them. Codes change only through
/// [`Codebook::ema_update`] and re-seeding, never through gradient steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub codes: Array2<f64>,
    pub counts: Array1<f64>,
    pub sums: Array2<f64>,
    /// Consecutive updates in which each code received no assignment.
    pub idle_steps: Vec<u64>,
    /// Total assignments per code over training.
    pub usage: Vec<u64>,
    pub decay: f64,
    pub eps: f64,
    pub dead_after: u64,
    pub initialized: bool,
    pub reseeds: u64,
}

fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest code by Euclidean distance; ties go to the lowest index.
pub fn quantize(e: ArrayView1<f64>, codes: &Array2<f64>) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in codes.rows().into_iter().enumerate() {
        let d = sq_dist(e, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

pub fn quantize_rows(embeddings: ArrayView2<f64>, codes: &Array2<f64>) -> Vec<usize> {
    embeddings.rows().into_iter().map(|e| quantize(e, codes)).collect()
}

/// Mean of `‖e_j − c_{k_j}‖²` over rows, with codes held constant.
pub fn commitment_loss(embeddings: ArrayView2<f64>, codes: &Array2<f64>) -> f64 {
    if embeddings.nrows() == 0 {
        return 0.0;
    }
    let total: f64 = embeddings
        .rows()
        .into_iter()
        .map(|e| sq_dist(e, codes.row(quantize(e, codes))))
        .sum();
    total / embeddings.nrows() as f64
}

/// Greedy farthest-point selection of `m` rows; the first row seeds the set. When the
/// rows run out of distinct points the remaining codes are jittered copies.
pub fn farthest_point_init(embeddings: ArrayView2<f64>, m: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = embeddings.ncols();
    let mut codes = Array2::zeros((m, d));
    if embeddings.nrows() == 0 {
        return codes;
    }
    codes.row_mut(0).assign(&embeddings.row(0));
    let mut nearest: Vec<f64> = embeddings.rows().into_iter().map(|e| sq_dist(e, embeddings.row(0))).collect();
    for k in 1..m {
        let (idx, &dist) = nearest
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
        if dist > 0.0 {
            codes.row_mut(k).assign(&embeddings.row(idx));
            for (j, e) in embeddings.rows().into_iter().enumerate() {
                nearest[j] = nearest[j].min(sq_dist(e, embeddings.row(idx)));
            }
        } else {
            let src = rng.random_range(0..embeddings.nrows());
            for (c, &v) in codes.row_mut(k).iter_mut().zip(embeddings.row(src)) {
                *c = v + 1e-3 * rng.random_range(-1.0..1.0);
            }
        }
    }
    codes
}

impl Codebook {
    pub fn new(codes: Array2<f64>, decay: f64, eps: f64, dead_after: u64) -> Self {
        let m = codes.nrows();
        Codebook {
            counts: Array1::ones(m),
            sums: codes.clone(),
            codes,
            idle_steps: vec![0; m],
            usage: vec![0; m],
            decay,
            eps,
            dead_after,
            initialized: false,
            reseeds: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.codes.nrows()
    }

    /// Replaces the codes with a farthest-point selection from `embeddings`, resetting
    /// the accumulators so that `sums / counts` equals the new codes.
    pub fn init_from(&mut self, embeddings: ArrayView2<f64>, rng: &mut ChaCha8Rng) {
        self.codes = farthest_point_init(embeddings, self.size(), rng);
        self.sums = self.codes.clone();
        self.counts.fill(1.0);
        self.idle_steps.fill(0);
        self.initialized = true;
    }

    /// One EMA step over the embeddings assigned in this batch. Returns the indices of
    /// codes that were re-seeded because they had been idle too long.
    pub fn ema_update(
        &mut self,
        embeddings: ArrayView2<f64>,
        assignments: &[usize],
        rng: Option<&mut ChaCha8Rng>,
    ) -> Vec<usize> {
        let m = self.size();
        let a = self.decay;
        let mut batch_counts = vec![0.0; m];
        let mut batch_sums = Array2::<f64>::zeros(self.codes.dim());
        for (e, &k) in embeddings.rows().into_iter().zip(assignments) {
            batch_counts[k] += 1.0;
            let mut row = batch_sums.row_mut(k);
            row += &e;
        }
        for k in 0..m {
            self.counts[k] = a * self.counts[k] + (1.0 - a) * batch_counts[k];
            let mut s = self.sums.row_mut(k);
            s *= a;
            s.scaled_add(1.0 - a, &batch_sums.row(k));
            let n = self.counts[k].max(self.eps);
            let mut c = self.codes.row_mut(k);
            c.assign(&(&self.sums.row(k) / n));
            if batch_counts[k] > 0.0 {
                self.idle_steps[k] = 0;
                self.usage[k] += batch_counts[k] as u64;
            } else {
                self.idle_steps[k] += 1;
            }
        }
        let mut reseeded = Vec::new();
        if let Some(rng) = rng {
            if embeddings.nrows() > 0 {
                for k in 0..m {
                    if self.idle_steps[k] >= self.dead_after {
                        let src = rng.random_range(0..embeddings.nrows());
                        self.codes.row_mut(k).assign(&embeddings.row(src));
                        self.sums.row_mut(k).assign(&embeddings.row(src));
                        self.counts[k] = 1.0;
                        self.idle_steps[k] = 0;
                        self.reseeds += 1;
                        reseeded.push(k);
                    }
                }
            }
        }
        if !reseeded.is_empty() {
            log::info!("re-seeded idle codes {reseeded:?}");
        }
        reseeded
    }
}
